"""Locomotion task reward: pose, forward velocity, efficiency and alive terms.

All functions accept a single sample or a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

FORWARD = np.array([0.0, 1.0, 0.0])
UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class RewardConfig:
    w_heading: float = 0.5
    w_up: float = 0.1
    t_heading: float = 0.8
    t_up: float = 0.9
    w_act: float = -0.05
    w_energy: float = -0.05
    w_jointlimit: float = -0.1
    t_jointlimit: float = 0.99
    dt: float = 1.0 / 60.0
    alive_bonus: float = 0.5

    def __post_init__(self):
        for name in ("t_heading", "t_up", "t_jointlimit"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RewardBreakdown:
    r_p: np.ndarray | float
    r_v: np.ndarray | float
    r_e: np.ndarray | float
    r_a: np.ndarray | float

    @property
    def total(self):
        return self.r_p + self.r_v + self.r_e + self.r_a


def _thresholded(p, t):
    # 1 above the threshold, linear (and unclamped below) otherwise
    return np.where(p >= t, 1.0, p / t)


def heading_reward(heading, cfg: RewardConfig = RewardConfig()):
    p = np.asarray(heading, dtype=float) @ FORWARD
    return _thresholded(p, cfg.t_heading)


def up_reward(up, cfg: RewardConfig = RewardConfig()):
    p = np.asarray(up, dtype=float) @ UP
    return _thresholded(p, cfg.t_up)


def pose_reward(heading, up, cfg: RewardConfig = RewardConfig()):
    return cfg.w_heading * heading_reward(heading, cfg) + cfg.w_up * up_reward(up, cfg)


def velocity_reward(y_prev, y_curr, cfg: RewardConfig = RewardConfig()):
    return (np.asarray(y_curr, dtype=float) - np.asarray(y_prev, dtype=float)) / cfg.dt


def efficiency_reward(action, joint_vel, joint_pos_norm, cfg: RewardConfig = RewardConfig()):
    a = np.asarray(action, dtype=float)
    v = np.asarray(joint_vel, dtype=float)
    p = np.asarray(joint_pos_norm, dtype=float)
    if a.shape != v.shape or a.shape != p.shape:
        raise ValueError(f"shape mismatch: action {a.shape}, velocity {v.shape}, position {p.shape}")
    r_act = np.sum(a * a, axis=-1)
    r_energy = np.sum(np.abs(a * v), axis=-1)
    n_limit = np.sum(np.abs(p) > cfg.t_jointlimit, axis=-1)
    return cfg.w_act * r_act + cfg.w_energy * r_energy + cfg.w_jointlimit * n_limit


def alive_reward(terminated, cfg: RewardConfig = RewardConfig()):
    return np.where(np.asarray(terminated, dtype=bool), 0.0, cfg.alive_bonus)


def total_reward(heading, up, y_prev, y_curr, action, joint_vel, joint_pos_norm, terminated,
                 cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """All four terms from the quantities of the previous and current state."""
    return RewardBreakdown(
        r_p=pose_reward(heading, up, cfg),
        r_v=velocity_reward(y_prev, y_curr, cfg),
        r_e=efficiency_reward(action, joint_vel, joint_pos_norm, cfg),
        r_a=alive_reward(terminated, cfg),
    )


def state_reward(prev_state, state, model, action, terminated, cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """``total_reward`` evaluated on simulator states (batched over environments)."""
    from .physics import heading, up_vector, normalize_joint_pos

    return total_reward(
        heading(state), up_vector(state),
        prev_state.root_pos[:, 1], state.root_pos[:, 1],
        action, state.qd,
        normalize_joint_pos(state.q, model.lo, model.hi),
        terminated, cfg,
    )
