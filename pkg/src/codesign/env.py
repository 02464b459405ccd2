"""Batched locomotion environment: actions in, observations, rewards and episode ends out."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .morphology import AgentGraph
from .physics import (ArticulatedModel, ContactParams, SimParams, SimState, TerminationLimits, forward_kinematics,
                      init_sim, lowest_point, morphology_features, observe, step, terminated)
from .reward import RewardConfig, state_reward


@dataclass(frozen=True)
class EnvConfig:
    reward: RewardConfig = field(default_factory=RewardConfig)
    contact: ContactParams = field(default_factory=ContactParams)
    sim: SimParams = field(default_factory=SimParams)
    limits: TerminationLimits = field(default_factory=TerminationLimits)
    randomization: float = 0.05
    max_steps: int = 150
    control: str = "pd"         # "pd" targets or direct "torque"
    target: tuple = (0.0, 10.0, 0.0)

    def __post_init__(self):
        if self.control not in ("pd", "torque"):
            raise ValueError(f"unknown control mode {self.control!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def morphology_reference(template: AgentGraph) -> np.ndarray:
    return morphology_features(ArticulatedModel.from_agents([template]))[0]


def normalize_morphology(s_m: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Fixed scaling of morphology features: deviation from the template, relative to its size."""
    return (s_m - reference) / np.maximum(np.abs(reference), 0.1)


class VecEnv:
    """``copies`` environments for each agent, stepped together.

    Episodes end on termination or after ``max_steps``; finished
    environments are reset immediately. ``step`` reports both cases and
    hands back the final observation of time-limited episodes so the
    learner can bootstrap from it.
    """

    def __init__(self, agents: Sequence[AgentGraph], copies: int, cfg: EnvConfig,
                 rng: np.random.Generator, sm_reference: np.ndarray | None = None):
        self.agents = tuple(agents)
        self.copies = int(copies)
        self.cfg = cfg
        self.rng = rng
        self.model = ArticulatedModel.repeat(self.agents, self.copies, cfg.contact)
        self.variant = np.repeat(np.arange(len(self.agents)), self.copies)
        raw = morphology_features(self.model)
        self.sm_reference = raw[0].copy() if sm_reference is None else np.asarray(sm_reference)
        if self.sm_reference.shape != raw.shape[1:]:
            raise ValueError("morphology reference does not match the agents' layout")
        self.s_m = normalize_morphology(raw, self.sm_reference)
        self.state: SimState | None = None
        self.steps = np.zeros(self.n_envs, dtype=int)
        self.episode_return = np.zeros(self.n_envs)

    @property
    def n_envs(self) -> int:
        return self.model.n_envs

    @property
    def act_dim(self) -> int:
        return self.model.n_joints

    def _init(self) -> SimState:
        return init_sim(self.model, self.cfg.randomization, self.rng, self.cfg.contact)

    def observe(self, state: SimState | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(s_m, s_p | s_g) with s_m already normalized."""
        obs = observe(self.state if state is None else state, self.model, self.cfg.target, self.s_m)
        return obs.s_m, np.concatenate([obs.s_p, obs.s_g], axis=1)

    def reset(self, state: SimState | None = None):
        self.state = self._init() if state is None else state
        self.steps[:] = 0
        self.episode_return[:] = 0.0
        return self.observe()

    def joint_command(self, action: np.ndarray) -> np.ndarray:
        a = np.clip(action, -1.0, 1.0)
        if self.cfg.control == "pd":
            mid = 0.5 * (self.model.lo + self.model.hi)
            half = 0.5 * (self.model.hi - self.model.lo)
            return mid + half * a
        return a * self.model.max_effort

    def step(self, action: np.ndarray):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        cmd = self.joint_command(a)
        prev = self.state
        if self.cfg.control == "pd":
            nxt = step(prev, self.model, None, self.cfg.contact, self.cfg.reward.dt, pd_targets=cmd, params=self.cfg.sim)
        else:
            nxt = step(prev, self.model, cmd, self.cfg.contact, self.cfg.reward.dt, params=self.cfg.sim)
        nxt.prev_action = a
        term, reason = terminated(nxt, self.model, self.cfg.limits)
        rew = state_reward(prev, nxt, self.model, a, term, self.cfg.reward)
        reward = np.where(nxt.diverged, 0.0, rew.total)
        self.steps += 1
        self.episode_return += reward
        truncated = ~term & (self.steps >= self.cfg.max_steps)
        done = term | truncated
        info = {"terminated": term, "truncated": truncated, "reason": reason, "breakdown": rew}
        self.state = nxt
        if truncated.any():
            info["final_obs"] = self.observe(nxt)[1]
        if done.any():
            info["episode_returns"] = self.episode_return[done].copy()
            info["episode_variants"] = self.variant[done].copy()
            fresh = self._init()
            self.state.assign(done, fresh)
            self.steps[done] = 0
            self.episode_return[done] = 0.0
        s_m, obs = self.observe()
        return s_m, obs, reward, done, info


def episode_init_states(model: ArticulatedModel, episodes: int, seed: int, cfg: EnvConfig) -> SimState:
    """Initial states where episode ``k`` starts from the same perturbation for every agent."""
    J = model.n_joints
    rng = np.random.default_rng(seed)
    pert = rng.uniform(-cfg.randomization, cfg.randomization, size=(episodes, J))
    n_agents = model.n_envs // episodes
    state = init_sim(model, 0.0, None, cfg.contact)
    q = np.clip(np.tile(pert, (n_agents, 1)), model.lo, model.hi)
    # place each environment again with its perturbed joints
    quat = state.root_quat
    pos0 = np.zeros((model.n_envs, 3))
    pos, rot = forward_kinematics(model, pos0, quat, q)
    pos0[:, 2] = cfg.contact.ground_height + 0.01 - lowest_point(model, pos, rot)
    pos, rot = forward_kinematics(model, pos0, quat, q)
    state.q, state.root_pos, state.body_pos, state.body_rot = q, pos0, pos, rot
    state.init_height = pos0[:, 2].copy()
    return state


def rollout_returns(agents: Sequence[AgentGraph], act, episodes: int, seed: int, cfg: EnvConfig,
                    sm_reference: np.ndarray | None = None, trajectory: list | None = None) -> np.ndarray:
    """Undiscounted return of every (agent, episode), shape (n_agents, episodes).

    ``act(s_m, obs)`` maps observations to actions. Each environment runs
    one episode; finished environments keep stepping but stop accumulating.
    """
    env = VecEnv(agents, episodes, cfg, np.random.default_rng(seed), sm_reference)
    env.reset(episode_init_states(env.model, episodes, seed, cfg))
    alive = np.ones(env.n_envs, dtype=bool)
    total = np.zeros(env.n_envs)
    s_m, obs = env.observe()
    for _ in range(cfg.max_steps):
        if trajectory is not None:
            trajectory.append(env.state.copy())
        prev = env.state
        a = np.clip(act(s_m, obs), -1.0, 1.0)
        cmd = env.joint_command(a)
        if cfg.control == "pd":
            nxt = step(prev, env.model, None, cfg.contact, cfg.reward.dt, pd_targets=cmd, params=cfg.sim)
        else:
            nxt = step(prev, env.model, cmd, cfg.contact, cfg.reward.dt, params=cfg.sim)
        nxt.prev_action = a
        term, _ = terminated(nxt, env.model, cfg.limits)
        r = state_reward(prev, nxt, env.model, a, term, cfg.reward).total
        total += np.where(alive & ~nxt.diverged, r, 0.0)
        alive &= ~term
        env.state = nxt
        if not alive.any():
            break
        s_m, obs = env.observe()
    return total.reshape(len(agents), episodes)
