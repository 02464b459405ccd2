"""PPO with GAE, clipped surrogate and value losses, and a KL-adaptive learning rate.

A single ``Learner`` owns the policy, the value network, their optimizer
states and the observation/return normalizers. Baseline training and
generation training both drive a learner over a ``VecEnv``; a generation
simply starts from a copy of its parent's learner.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, asdict, field
from typing import Callable, Sequence

import numpy as np

from .env import EnvConfig, VecEnv, morphology_reference, rollout_returns
from .errors import LayoutMismatch, LengthMismatch, NonFiniteLoss
from .morphology import AgentGraph
from .nn import (HIDDEN, AdamState, GaussianPolicy, ValueNet, adam_update, backward, gaussian_entropy,
                 gaussian_log_prob, load_checkpoint, mlp_forward, save_checkpoint)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    desired_kl: float = 0.01
    lr: float = 3e-4
    lr_min: float = 1e-4
    lr_max: float = 1e-3
    epochs_per_buffer: int = 5
    minibatch_count: int = 4
    horizon: int = 32
    n_envs: int = 64
    epochs: int = 200
    entropy_coef: float = 0.0
    value_coef: float = 1.0
    max_grad_norm: float = 1.0
    hidden: tuple = HIDDEN
    init_log_sigma: float = 0.0
    normalize_returns: bool = True
    eval_episodes: int = 4
    eval_seed: int = 12345
    checkpoint_every: int = 50

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not self.lr_min <= self.lr <= self.lr_max:
            raise ValueError("lr must lie in [lr_min, lr_max]")
        if self.horizon < 1 or self.n_envs < 1 or self.minibatch_count < 1 or self.epochs < 0:
            raise ValueError("horizon, n_envs and minibatch_count must be >= 1, epochs >= 0")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# -- pure pieces ----------------------------------------------------------------------

def compute_gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float):
    """Advantages and returns along axis 0 (time); trailing axes are independent streams."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if r.shape != v.shape or r.shape != d.shape:
        raise LengthMismatch(f"rewards {r.shape}, values {v.shape}, dones {d.shape}")
    boot = np.broadcast_to(np.asarray(bootstrap_value, dtype=float), r.shape[1:])
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    next_v = boot
    for t in range(r.shape[0] - 1, -1, -1):
        keep = 1.0 - d[t]
        delta = r[t] + gamma * next_v * keep - v[t]
        last = delta + gamma * lam * keep * last
        adv[t] = last
        next_v = v[t]
    return adv, adv + v


def adapt_lr(lr: float, kl: float, desired_kl: float, lr_min: float = 1e-4, lr_max: float = 1e-3) -> float:
    if kl > 2.0 * desired_kl:
        return max(lr / 1.5, lr_min)
    if kl < desired_kl / 2.0:
        return min(lr * 1.5, lr_max)
    return lr


def gaussian_kl(mu_old, ls_old, mu, ls):
    """KL(old || new) of diagonal Gaussians, summed over action dimensions."""
    return np.sum(ls - ls_old + (np.exp(2 * ls_old) + (mu_old - mu) ** 2) / (2 * np.exp(2 * ls)) - 0.5, axis=-1)


def surrogate_loss(ratio, adv, clip_eps):
    """Clipped surrogate loss and its derivative with respect to each ratio."""
    clipped = np.clip(ratio, 1 - clip_eps, 1 + clip_eps)
    unclipped_wins = ratio * adv <= clipped * adv
    loss = -np.mean(np.where(unclipped_wins, ratio * adv, clipped * adv))
    grad = np.where(unclipped_wins, -adv, 0.0) / len(ratio)
    return loss, grad


def value_loss(v, v_old, ret, clip_eps):
    """Clipped value loss and its derivative with respect to each prediction."""
    dv = v - v_old
    v_clip = v_old + np.clip(dv, -clip_eps, clip_eps)
    a, b = (v - ret) ** 2, (v_clip - ret) ** 2
    inside = np.abs(dv) < clip_eps
    grad = np.where(a >= b, 2 * (v - ret), 2 * (v_clip - ret) * inside) / len(v)
    return np.mean(np.maximum(a, b)), grad


def clip_grad(g: np.ndarray, max_norm: float) -> np.ndarray:
    n = np.linalg.norm(g)
    return g * (max_norm / n) if n > max_norm else g


def policy_loss_grad(policy: GaussianPolicy, x, a, logp_old, adv, clip_eps: float, entropy_coef: float = 0.0,
                     forward=None):
    """Surrogate loss minus the entropy bonus, and its gradient with respect to ``policy.theta``.

    ``x`` is ignored when a precomputed ``forward = (mu, tape)`` is given.
    Also returns the probability ratios and the entropy.
    """
    mu, tape = forward if forward is not None else mlp_forward(policy.mean_net, x)
    ls = policy.log_sigma
    logp = gaussian_log_prob(a, mu, ls)
    ratio = np.exp(logp - logp_old)
    pl, d_ratio = surrogate_loss(ratio, adv, clip_eps)
    ent = float(gaussian_entropy(ls))
    d_logp = d_ratio * ratio
    inv_var = np.exp(-2 * ls)
    g_mu = d_logp[:, None] * (a - mu) * inv_var
    g_ls = np.sum(d_logp[:, None] * ((a - mu) ** 2 * inv_var - 1.0), axis=0) - entropy_coef
    return pl - entropy_coef * ent, np.concatenate([backward(tape, g_mu), g_ls]), ratio, ent


def value_loss_grad(value: ValueNet, x, v_old, ret, clip_eps: float):
    """Clipped value loss and its gradient with respect to ``value.theta``."""
    v, tape = mlp_forward(value.net, x)
    vl, d_v = value_loss(v[:, 0], v_old, ret, clip_eps)
    return vl, backward(tape, d_v[:, None])


@dataclass
class RunningMeanStd:
    mean: np.ndarray
    var: np.ndarray
    count: float = 1e-4

    @classmethod
    def zeros(cls, shape) -> "RunningMeanStd":
        return cls(np.zeros(shape), np.ones(shape))

    def update(self, x: np.ndarray) -> None:
        x = x.reshape(-1, *self.mean.shape)
        bm, bv, n = x.mean(axis=0), x.var(axis=0), x.shape[0]
        delta = bm - self.mean
        tot = self.count + n
        self.mean = self.mean + delta * n / tot
        self.var = (self.var * self.count + bv * n + delta ** 2 * self.count * n / tot) / tot
        self.count = tot

    @property
    def std(self):
        return np.sqrt(self.var + 1e-8)

    def normalize(self, x, clip: float = 10.0):
        return np.clip((x - self.mean) / self.std, -clip, clip)


# -- buffer and learner ----------------------------------------------------------------

@dataclass
class RolloutBuffer:
    """Time-major (T, E, ...) experience from one collection phase."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    mu: np.ndarray
    log_sigma: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    variant: np.ndarray
    bootstrap: np.ndarray
    episode_returns: list = field(default_factory=list)
    episode_variants: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.rewards.size

    def clear(self) -> None:
        for name in ("obs", "actions", "log_probs", "mu", "rewards", "values", "dones", "variant"):
            arr = getattr(self, name)
            setattr(self, name, arr[:0])


@dataclass
class UpdateStats:
    kl: float
    clip_frac: float
    policy_loss: float
    value_loss: float
    entropy: float
    lr: float


class Learner:
    def __init__(self, sm_dim: int, obs_dim: int, act_dim: int, cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.sm_dim, self.obs_dim, self.act_dim = sm_dim, obs_dim, act_dim
        n_in = sm_dim + obs_dim
        self.policy = GaussianPolicy.init(n_in, act_dim, rng, cfg.hidden, cfg.init_log_sigma)
        self.value = ValueNet.init(n_in, rng, cfg.hidden)
        self.pi_opt = AdamState.like(self.policy.theta)
        self.v_opt = AdamState.like(self.value.theta)
        self.obs_rms = RunningMeanStd.zeros(obs_dim)
        self.ret_rms = RunningMeanStd.zeros(())
        self.lr = cfg.lr
        self.epoch = 0

    def copy(self) -> "Learner":
        return copy.deepcopy(self)

    def net_input(self, s_m, obs) -> np.ndarray:
        return np.concatenate([s_m, self.obs_rms.normalize(obs)], axis=-1)

    def act(self, s_m, obs) -> np.ndarray:
        """Deterministic action (the policy mean)."""
        return self.policy.mean(self.net_input(s_m, obs))

    def values_of(self, x) -> np.ndarray:
        v = self.value(x)
        if self.cfg.normalize_returns:
            v = v * self.ret_rms.std + self.ret_rms.mean
        return v

    # -- collection
    def collect(self, env: VecEnv, state: dict, rng: np.random.Generator) -> RolloutBuffer:
        """Advance ``env`` by ``horizon`` steps with sampled actions.

        ``state`` carries the current observations across calls.
        """
        T, E = self.cfg.horizon, env.n_envs
        D = self.sm_dim + self.obs_dim
        buf = RolloutBuffer(
            obs=np.zeros((T, E, D)), actions=np.zeros((T, E, self.act_dim)), log_probs=np.zeros((T, E)),
            mu=np.zeros((T, E, self.act_dim)), log_sigma=self.policy.log_sigma.copy(), rewards=np.zeros((T, E)),
            values=np.zeros((T, E)), dones=np.zeros((T, E), dtype=bool), variant=np.tile(env.variant, (T, 1)),
            bootstrap=np.zeros(E))
        s_m, obs = state["s_m"], state["obs"]
        for t in range(T):
            self.obs_rms.update(obs)
            x = self.net_input(s_m, obs)
            mu = self.policy.mean(x)
            a = mu + np.exp(self.policy.log_sigma) * rng.standard_normal(mu.shape)
            buf.obs[t], buf.mu[t], buf.actions[t] = x, mu, a
            buf.log_probs[t] = gaussian_log_prob(a, mu, self.policy.log_sigma)
            buf.values[t] = self.values_of(x)
            s_m, obs, r, done, info = env.step(a)
            if info["truncated"].any():
                tr = info["truncated"]
                # time limits are not terminal: fold the tail value into the last reward
                r = r + self.cfg.gamma * tr * self.values_of(self.net_input(s_m, _rows(info["final_obs"], obs, tr)))
            buf.rewards[t], buf.dones[t] = r, done
            if "episode_returns" in info:
                buf.episode_returns.extend(info["episode_returns"].tolist())
                buf.episode_variants.extend(info["episode_variants"].tolist())
        buf.bootstrap = self.values_of(self.net_input(s_m, obs))
        state["s_m"], state["obs"] = s_m, obs
        return buf

    # -- update
    def update(self, buf: RolloutBuffer, rng: np.random.Generator) -> UpdateStats:
        cfg = self.cfg
        adv, ret = compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap, cfg.gamma, cfg.lam)
        n = buf.size
        x = buf.obs.reshape(n, -1)
        a = buf.actions.reshape(n, -1)
        logp_old = buf.log_probs.reshape(n)
        mu_old = buf.mu.reshape(n, -1)
        ls_old = buf.log_sigma
        ret = ret.reshape(n)
        v_old = buf.values.reshape(n)
        adv = adv.reshape(n)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        if cfg.normalize_returns:
            self.ret_rms.update(ret)
            ret_t = (ret - self.ret_rms.mean) / self.ret_rms.std
            v_old_t = (v_old - self.ret_rms.mean) / self.ret_rms.std
        else:
            ret_t, v_old_t = ret, v_old
        kls, clips, pls, vls, ents = [], [], [], [], []
        mb = max(1, n // cfg.minibatch_count)
        for _ in range(cfg.epochs_per_buffer):
            perm = rng.permutation(n)
            for k in range(cfg.minibatch_count):
                idx = perm[k * mb:(k + 1) * mb] if k < cfg.minibatch_count - 1 else perm[k * mb:]
                if len(idx) == 0:
                    continue
                stats = self._minibatch(x[idx], a[idx], logp_old[idx], mu_old[idx], ls_old, adv[idx],
                                        ret_t[idx], v_old_t[idx])
                kls.append(stats[0]); clips.append(stats[1]); pls.append(stats[2])
                vls.append(stats[3]); ents.append(stats[4])
        buf.clear()
        self.epoch += 1
        return UpdateStats(float(np.mean(kls)), float(np.mean(clips)), float(np.mean(pls)),
                           float(np.mean(vls)), float(np.mean(ents)), self.lr)

    def _minibatch(self, x, a, logp_old, mu_old, ls_old, adv, ret, v_old):
        cfg = self.cfg
        mu, tape = mlp_forward(self.policy.mean_net, x)
        kl = float(np.mean(gaussian_kl(mu_old, ls_old, mu, self.policy.log_sigma)))
        self.lr = adapt_lr(self.lr, kl, cfg.desired_kl, cfg.lr_min, cfg.lr_max)

        pl, g_pi, ratio, ent = policy_loss_grad(self.policy, x, a, logp_old, adv, cfg.clip_eps, cfg.entropy_coef,
                                                forward=(mu, tape))
        vl, g_v = value_loss_grad(self.value, x, v_old, ret, cfg.clip_eps)
        g_v = cfg.value_coef * g_v
        total = pl + cfg.value_coef * vl
        if not np.isfinite(total) or not np.all(np.isfinite(g_pi)) or not np.all(np.isfinite(g_v)):
            raise NonFiniteLoss(f"loss {total} or its gradient is not finite")

        self.policy.theta[...] = adam_update(self.policy.theta, clip_grad(g_pi, cfg.max_grad_norm), self.lr, self.pi_opt)
        self.value.theta[...] = adam_update(self.value.theta, clip_grad(g_v, cfg.max_grad_norm), self.lr, self.v_opt)
        clip_frac = float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps))
        return kl, clip_frac, pl, vl, ent

    # -- persistence
    def state_arrays(self) -> dict:
        return {
            "policy": self.policy.theta, "value": self.value.theta,
            "pi_m": self.pi_opt.m, "pi_v": self.pi_opt.v, "v_m": self.v_opt.m, "v_v": self.v_opt.v,
            "obs_mean": self.obs_rms.mean, "obs_var": self.obs_rms.var,
            "ret_mean": np.asarray(self.ret_rms.mean), "ret_var": np.asarray(self.ret_rms.var),
        }

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"sm_dim": self.sm_dim, "obs_dim": self.obs_dim, "act_dim": self.act_dim, "lr": self.lr,
                "epoch": self.epoch, "pi_step": self.pi_opt.step, "v_step": self.v_opt.step,
                "obs_count": self.obs_rms.count, "ret_count": self.ret_rms.count,
                "train": self.cfg.to_dict(), **(extra or {})}
        save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path, cfg: TrainConfig | None = None) -> tuple["Learner", dict]:
        arrays, meta = load_checkpoint(path)
        if cfg is None:
            cfg = TrainConfig(**meta["train"])
        self = cls.__new__(cls)
        self.cfg = cfg
        self.sm_dim, self.obs_dim, self.act_dim = meta["sm_dim"], meta["obs_dim"], meta["act_dim"]
        n_in = self.sm_dim + self.obs_dim
        self.policy = GaussianPolicy((n_in, *cfg.hidden, self.act_dim), arrays["policy"])
        self.value = ValueNet((n_in, *cfg.hidden, 1), arrays["value"])
        self.pi_opt = AdamState(arrays["pi_m"], arrays["pi_v"], meta["pi_step"])
        self.v_opt = AdamState(arrays["v_m"], arrays["v_v"], meta["v_step"])
        self.obs_rms = RunningMeanStd(arrays["obs_mean"], arrays["obs_var"], meta["obs_count"])
        self.ret_rms = RunningMeanStd(arrays["ret_mean"][()], arrays["ret_var"][()], meta["ret_count"])
        self.lr = meta["lr"]
        self.epoch = meta["epoch"]
        return self, meta


def _rows(final_obs, obs, mask):
    out = obs.copy()
    out[mask] = final_obs[mask]
    return out


# -- training loops ----------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    mean_reward: float
    episodes: int
    kl: float
    lr: float
    clip_frac: float
    policy_loss: float
    value_loss: float
    wall: float


def make_learner(env: VecEnv, cfg: TrainConfig, rng: np.random.Generator) -> Learner:
    s_m, obs = env.observe() if env.state is not None else env.reset()
    return Learner(s_m.shape[1], obs.shape[1], env.act_dim, cfg, rng)


def train(learner: Learner, env: VecEnv, epochs: int, rng: np.random.Generator,
          callback: Callable[[Learner, EpochLog], None] | None = None) -> list[EpochLog]:
    """Alternate collection and update for ``epochs`` epochs.

    The per-epoch reward is the mean return of episodes that finished during
    the epoch (the previous value is carried when none did).
    """
    s_m, obs = env.reset()
    carry = {"s_m": s_m, "obs": obs}
    logs = []
    last = float("nan")
    t0 = time.time()
    for _ in range(epochs):
        buf = learner.collect(env, carry, rng)
        finished = len(buf.episode_returns)
        if finished:
            last = float(np.mean(buf.episode_returns))
        elif np.isnan(last):
            last = float(np.mean(env.episode_return / np.maximum(env.steps, 1)) * env.cfg.max_steps)
        stats = learner.update(buf, rng)
        log = EpochLog(learner.epoch, last, finished, stats.kl, stats.lr, stats.clip_frac,
                       stats.policy_loss, stats.value_loss, time.time() - t0)
        logs.append(log)
        if callback is not None:
            callback(learner, log)
    return logs


def train_single(agent: AgentGraph, cfg: TrainConfig, env_cfg: EnvConfig, rng: np.random.Generator,
                 learner: Learner | None = None, callback=None):
    """Train a policy for one agent on ``cfg.n_envs`` copies of it.

    Returns the learner and its per-epoch mean episode reward.
    """
    env = VecEnv([agent], cfg.n_envs, env_cfg, rng, morphology_reference(agent))
    if learner is None:
        learner = make_learner(env, cfg, rng)
    logs = train(learner, env, cfg.epochs, rng, callback)
    return learner, [l.mean_reward for l in logs], logs


def train_generation(agents: Sequence[AgentGraph], template: AgentGraph, base: Learner | None,
                     cfg: TrainConfig, env_cfg: EnvConfig, rng: np.random.Generator, epochs: int | None = None,
                     callback=None):
    """Train one shared policy on every variant at once, warm-started from ``base``.

    Returns the trained learner, the per-variant deterministic fitness and the epoch logs.
    """
    topo = template.topology()
    if any(a.topology() != topo for a in agents):
        raise LayoutMismatch("every variant must share the template topology")
    copies = max(1, cfg.n_envs // len(agents))
    env = VecEnv(agents, copies, env_cfg, rng, morphology_reference(template))
    learner = make_learner(env, cfg, rng) if base is None else base.copy()
    logs = train(learner, env, cfg.epochs if epochs is None else epochs, rng, callback)
    fitness = evaluate_many(learner, agents, template, env_cfg, cfg.eval_episodes, cfg.eval_seed)
    return learner, fitness, logs


def evaluate_many(learner: Learner, agents: Sequence[AgentGraph], template: AgentGraph, env_cfg: EnvConfig,
                  episodes: int, seed: int, trajectory: list | None = None) -> np.ndarray:
    """Mean deterministic episode return per agent."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    returns = rollout_returns(agents, learner.act, episodes, seed, env_cfg, morphology_reference(template),
                              trajectory)
    return returns.mean(axis=1)


def evaluate(learner: Learner, agent: AgentGraph, env_cfg: EnvConfig, episodes: int, seed: int,
             template: AgentGraph | None = None) -> float:
    return float(evaluate_many(learner, [agent], template or agent, env_cfg, episodes, seed)[0])


def write_metrics(path, logs: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_reward", "episodes", "kl", "lr", "clip_frac", "policy_loss", "value_loss", "wall"])
        for l in logs:
            w.writerow([l.epoch, l.mean_reward, l.episodes, l.kl, l.lr, l.clip_frac, l.policy_loss,
                        l.value_loss, round(l.wall, 3)])
