"""Reduced-coordinate rigid-body simulation of capsule agents on flat ground.

Every array carries a leading environment axis ``E`` so that a whole
population of same-topology variants steps together. Forward dynamics is the
articulated-body algorithm with a floating (or optionally welded) root;
spatial vectors are ``(angular, linear)`` in body coordinates. Contact is a
penalty spring-damper at the two end spheres of each capsule with
Coulomb-capped viscous friction.

Integration is drift-kick-drift leapfrog: positions advance half a substep,
dynamics are evaluated there, velocities take a full kick, positions take the
second half. It costs one dynamics evaluation per substep like plain
semi-implicit Euler but is exact for constant acceleration.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import LayoutMismatch
from .morphology import AgentGraph, capsule_mass

GRAVITY = 9.81


@dataclass(frozen=True)
class ContactParams:
    ground_stiffness: float = 2.0e4
    ground_damping: float = 2.0e2
    friction_coeff: float = 1.0
    ground_height: float = 0.0
    # slope of the viscous friction law below the Coulomb cap, N*s/m
    tangential_damping: float = 1.0e3
    enabled: bool = True
    self_collision: bool = False

    def __post_init__(self):
        if not self.ground_stiffness > 0:
            raise ValueError("ground_stiffness must be > 0")
        if self.ground_damping < 0 or self.friction_coeff < 0 or self.tangential_damping < 0:
            raise ValueError("damping and friction must be >= 0")


@dataclass(frozen=True)
class SimParams:
    gravity: float = GRAVITY
    substeps: int = 8
    limit_stiffness: float = 500.0
    limit_damping: float = 5.0
    fixed_base: bool = False
    # "compiled" runs the per-environment kernel, "numpy" the array reference
    backend: str = "compiled"

    def __post_init__(self):
        if self.backend not in ("compiled", "numpy"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")


# -- small batched linear algebra ------------------------------------------------

def skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrices to unit quaternions (w, x, y, z) with w >= 0."""
    tr = m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]
    cand = np.stack([
        np.stack([1 + tr, m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], -1),
        np.stack([m[..., 2, 1] - m[..., 1, 2], 1 + m[..., 0, 0] - m[..., 1, 1] - m[..., 2, 2],
                  m[..., 0, 1] + m[..., 1, 0], m[..., 0, 2] + m[..., 2, 0]], -1),
        np.stack([m[..., 0, 2] - m[..., 2, 0], m[..., 0, 1] + m[..., 1, 0],
                  1 - m[..., 0, 0] + m[..., 1, 1] - m[..., 2, 2], m[..., 1, 2] + m[..., 2, 1]], -1),
        np.stack([m[..., 1, 0] - m[..., 0, 1], m[..., 0, 2] + m[..., 2, 0], m[..., 1, 2] + m[..., 2, 1],
                  1 - m[..., 0, 0] - m[..., 1, 1] + m[..., 2, 2]], -1),
    ], -2)
    # the candidate with the largest diagonal term is the best conditioned
    diag = np.stack([1 + tr, 1 + m[..., 0, 0] - m[..., 1, 1] - m[..., 2, 2],
                     1 - m[..., 0, 0] + m[..., 1, 1] - m[..., 2, 2], 1 - m[..., 0, 0] - m[..., 1, 1] + m[..., 2, 2]], -1)
    best = np.argmax(diag, axis=-1)
    q = np.take_along_axis(cand, best[..., None, None], axis=-2)[..., 0, :]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


def quat_exp(rotvec: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(half)/theta, with its series near zero
    k = np.where(theta > 1e-8, np.sin(half) / np.where(theta > 1e-8, theta, 1.0), 0.5 - theta ** 2 / 48.0)
    return np.concatenate([np.cos(half), k * rotvec], -1)


def _mv(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (m @ v[..., None])[..., 0]


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross carries a lot of axis bookkeeping; this is the hot path
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], -1)


def _crm(v: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Motion cross product v x m."""
    w, vl = v[..., :3], v[..., 3:]
    return np.concatenate([cross(w, m[..., :3]), cross(w, m[..., 3:]) + cross(vl, m[..., :3])], -1)


def _crf(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Force cross product v x* f."""
    w, vl = v[..., :3], v[..., 3:]
    return np.concatenate([cross(w, f[..., :3]) + cross(vl, f[..., 3:]), cross(w, f[..., 3:])], -1)


def capsule_inertia(length, radius, density):
    """Mass and principal inertias (about the capsule axis, across it) at the centre of mass."""
    length, radius, density = (np.asarray(x, dtype=float) for x in (length, radius, density))
    m_cyl = density * np.pi * radius ** 2 * length
    m_hem = density * (4.0 / 3.0) * np.pi * radius ** 3  # both caps together
    i_axis = m_cyl * radius ** 2 / 2 + m_hem * 2 * radius ** 2 / 5
    i_perp = (m_cyl * (length ** 2 / 12 + radius ** 2 / 4)
              + m_hem * (2 * radius ** 2 / 5 + length ** 2 / 4 + 3 * length * radius / 8))
    return m_cyl + m_hem, i_axis, i_perp


def spatial_inertia(mass, com, rot_inertia):
    """6x6 spatial inertia about the frame origin from mass, COM and inertia at the COM."""
    c = skew(com)
    out = np.zeros(np.shape(mass) + (6, 6))
    m = np.asarray(mass)[..., None, None]
    out[..., :3, :3] = rot_inertia + m * (c @ np.swapaxes(c, -1, -2))
    out[..., :3, 3:] = m * c
    out[..., 3:, :3] = m * np.swapaxes(c, -1, -2)
    out[..., 3:, 3:] = m * np.eye(3)
    return out


# -- model ------------------------------------------------------------------------

@dataclass(eq=False)
class ArticulatedModel:
    """Array form of one or more same-topology agents, ready for simulation."""

    agents: tuple
    part_ids: tuple
    parent: np.ndarray          # (N,) parent part index, -1 for the root
    mass: np.ndarray            # (E, N)
    com: np.ndarray             # (E, N, 3) body coordinates
    inertia: np.ndarray         # (E, N, 6, 6) spatial inertia about the body origin
    seg: np.ndarray             # (E, N, 3) capsule end point in body coordinates
    radius: np.ndarray          # (E, N)
    offset: np.ndarray          # (E, N, 3) body origin in parent coordinates
    axis: np.ndarray            # (E, J, 3)
    lo: np.ndarray              # (E, J)
    hi: np.ndarray
    stiffness: np.ndarray
    damping: np.ndarray
    max_effort: np.ndarray
    friction: np.ndarray        # (E, N) contact friction per part
    K: np.ndarray = field(repr=False, default=None)    # (E, J, 3, 3) skew(axis)
    K2: np.ndarray = field(repr=False, default=None)
    pairs: np.ndarray = field(repr=False, default=None)  # (P, 2) self-collision part pairs

    @property
    def n_envs(self) -> int:
        return self.mass.shape[0]

    @property
    def n_parts(self) -> int:
        return len(self.part_ids)

    @property
    def n_joints(self) -> int:
        return len(self.part_ids) - 1

    @classmethod
    def from_agents(cls, agents: Sequence[AgentGraph], contact: ContactParams | None = None) -> "ArticulatedModel":
        agents = tuple(agents)
        if not agents:
            raise ValueError("need at least one agent")
        topo = agents[0].topology()
        for a in agents[1:]:
            if a.topology() != topo:
                raise LayoutMismatch("all agents in one model must share a topology")
        contact = contact or ContactParams()
        order = agents[0].dfs_order()
        index = {pid: i for i, pid in enumerate(order)}
        parent = np.full(len(order), -1)
        for pid in order[1:]:
            parent[index[pid]] = index[agents[0].parent_joint(pid).parent]
        E, N = len(agents), len(order)
        lengths = np.zeros((E, N))
        radius = np.zeros((E, N))
        density = np.zeros((E, N))
        dirs = np.zeros((E, N, 3))
        attach = np.zeros((E, N))
        J = N - 1
        axis = np.zeros((E, J, 3))
        jr = np.zeros((E, J, 2))
        kp, kd, effort = np.zeros((E, J)), np.zeros((E, J)), np.zeros((E, J))
        friction = np.full((E, N), contact.friction_coeff)
        for e, agent in enumerate(agents):
            for i, pid in enumerate(order):
                p = agent.part(pid)
                lengths[e, i], radius[e, i], density[e, i] = p.length, p.radius, p.density
                dirs[e, i] = p.init_dir
                attach[e, i] = p.attach_pos
                if i > 0:
                    j = agent.parent_joint(pid)
                    axis[e, i - 1] = j.axis
                    jr[e, i - 1] = j.range
                    kp[e, i - 1], kd[e, i - 1], effort[e, i - 1] = j.stiffness, j.damping, j.max_effort
                    friction[e, i] = j.friction
        mass, i_ax, i_perp = capsule_inertia(lengths, radius, density)
        # inertia tensor at the COM: i_perp * I + (i_axis - i_perp) * d d^T
        rot = (i_perp[..., None, None] * np.eye(3)
               + (i_ax - i_perp)[..., None, None] * dirs[..., :, None] * dirs[..., None, :])
        com = 0.5 * lengths[..., None] * dirs
        seg = lengths[..., None] * dirs
        offset = np.zeros((E, N, 3))
        for i in range(1, N):
            offset[:, i] = seg[:, parent[i]] * attach[:, i, None]
        K = skew(axis)
        pairs = np.array([(a, b) for a in range(N) for b in range(a + 1, N)
                          if parent[b] != a and parent[a] != b and not (parent[a] == parent[b] and offset_equal(offset, a, b))],
                         dtype=int).reshape(-1, 2)
        return cls(agents, tuple(order), parent, mass, com, spatial_inertia(mass, com, rot), seg, radius,
                   offset, axis, jr[..., 0].copy(), jr[..., 1].copy(), kp, kd, effort, friction,
                   K, K @ K, pairs)

    def select(self, idx) -> "ArticulatedModel":
        """Sub-model holding only the environments in ``idx``."""
        idx = np.asarray(idx)
        out = {}
        for name in ("mass", "com", "inertia", "seg", "radius", "offset", "axis", "lo", "hi",
                     "stiffness", "damping", "max_effort", "friction", "K", "K2"):
            out[name] = getattr(self, name)[idx]
        agents = tuple(self.agents[i] for i in np.atleast_1d(idx))
        return replace(self, agents=agents, **out)

    @classmethod
    def repeat(cls, agents: Sequence[AgentGraph], copies: int, contact: ContactParams | None = None):
        """Model with ``copies`` consecutive environments per agent."""
        return cls.from_agents([a for a in agents for _ in range(copies)], contact)


def offset_equal(offset, a, b) -> bool:
    # siblings hinged at the same point always touch; never test them
    return bool(np.all(offset[:, a] == offset[:, b]))


# -- state ------------------------------------------------------------------------

@dataclass
class SimState:
    q: np.ndarray               # (E, J) joint angles
    qd: np.ndarray              # (E, J)
    root_pos: np.ndarray        # (E, 3) world position of the root frame
    root_quat: np.ndarray       # (E, 4) (w, x, y, z)
    root_vel: np.ndarray        # (E, 6) root spatial velocity in root coordinates (angular, linear)
    t: np.ndarray               # (E,)
    prev_action: np.ndarray     # (E, J)
    body_pos: np.ndarray        # (E, N, 3) world frame origins
    body_rot: np.ndarray        # (E, N, 3, 3) world orientations
    init_height: np.ndarray     # (E,)
    diverged: np.ndarray        # (E,) bool

    @property
    def root_rot(self) -> np.ndarray:
        return self.body_rot[:, 0]

    @property
    def root_lin_vel(self) -> np.ndarray:
        """Root origin velocity in world coordinates."""
        return _mv(self.root_rot, self.root_vel[:, 3:])

    @property
    def root_ang_vel(self) -> np.ndarray:
        return _mv(self.root_rot, self.root_vel[:, :3])

    def copy(self) -> "SimState":
        return SimState(**{k: np.array(v) for k, v in self.__dict__.items()})

    def select(self, idx) -> "SimState":
        return SimState(**{k: np.array(v[idx]) for k, v in self.__dict__.items()})

    def assign(self, mask: np.ndarray, other: "SimState") -> None:
        """Overwrite environments where ``mask`` is set with the matching rows of ``other``."""
        for k, v in self.__dict__.items():
            v[mask] = getattr(other, k)[mask]


def joint_rotations(model: ArticulatedModel, q: np.ndarray) -> np.ndarray:
    """Child-to-parent rotation of every hinge, (E, J, 3, 3)."""
    s = np.sin(q)[..., None, None]
    c = np.cos(q)[..., None, None]
    return np.eye(3) + s * model.K + (1 - c) * model.K2


def forward_kinematics(model: ArticulatedModel, root_pos, root_quat, q):
    """World position and orientation of every part frame."""
    E, N = q.shape[0], model.n_parts
    rel = joint_rotations(model, q)
    pos = np.empty((E, N, 3))
    rot = np.empty((E, N, 3, 3))
    pos[:, 0] = root_pos
    rot[:, 0] = quat_to_mat(root_quat)
    for i in range(1, N):
        p = model.parent[i]
        rot[:, i] = rot[:, p] @ rel[:, i - 1]
        pos[:, i] = pos[:, p] + _mv(rot[:, p], model.offset[:, i])
    return pos, rot


def capsule_endpoints(model: ArticulatedModel, pos, rot):
    """World coordinates of both capsule segment ends, (E, N, 2, 3)."""
    tip = pos + _mv(rot, model.seg)
    return np.stack([pos, tip], axis=2)


def lowest_point(model: ArticulatedModel, pos, rot) -> np.ndarray:
    ends = capsule_endpoints(model, pos, rot)
    return (ends[..., 2] - model.radius[..., None]).min(axis=(1, 2))


def init_sim(model: ArticulatedModel, randomization=0.0, rng: np.random.Generator | None = None,
             contact: ContactParams | None = None, clearance: float = 0.01) -> SimState:
    """Stand every environment at the origin with joints perturbed by up to +-randomization."""
    contact = contact or ContactParams()
    E, J = model.n_envs, model.n_joints
    half = np.broadcast_to(np.asarray(randomization, dtype=float), (J,))
    if np.any(half > 0):
        if rng is None:
            raise ValueError("randomized initial states need an rng")
        q = rng.uniform(-half, half, size=(E, J))
        q = np.clip(q, model.lo, model.hi)
    else:
        q = np.zeros((E, J))
    quat = np.tile([1.0, 0.0, 0.0, 0.0], (E, 1))
    pos0 = np.zeros((E, 3))
    pos, rot = forward_kinematics(model, pos0, quat, q)
    pos0[:, 2] = contact.ground_height + clearance - lowest_point(model, pos, rot)
    pos, rot = forward_kinematics(model, pos0, quat, q)
    return SimState(q=q, qd=np.zeros((E, J)), root_pos=pos0, root_quat=quat, root_vel=np.zeros((E, 6)),
                    t=np.zeros(E), prev_action=np.zeros((E, J)), body_pos=pos, body_rot=rot,
                    init_height=pos0[:, 2].copy(), diverged=np.zeros(E, dtype=bool))


# -- control ------------------------------------------------------------------------

def pd_torque(target: np.ndarray, q: np.ndarray, qd: np.ndarray, stiffness, damping, max_effort) -> np.ndarray:
    """Clamped PD law: stiffness * (target - q) - damping * qd, limited to +-max_effort."""
    tau = stiffness * (target - q) - damping * qd
    return np.clip(tau, -max_effort, max_effort)


def model_pd_torque(model: ArticulatedModel, target, state: SimState) -> np.ndarray:
    return pd_torque(target, state.q, state.qd, model.stiffness, model.damping, model.max_effort)


def limit_torque(model: ArticulatedModel, q, qd, params: SimParams) -> np.ndarray:
    over = q - model.hi
    under = model.lo - q
    tau = np.where(over > 0, -params.limit_stiffness * over - params.limit_damping * np.maximum(qd, 0.0), 0.0)
    tau = tau + np.where(under > 0, params.limit_stiffness * under - params.limit_damping * np.minimum(qd, 0.0), 0.0)
    return tau


# -- forces -------------------------------------------------------------------------

def _point_wrench(rot, origin, point_w, force_w):
    """Body-coordinate wrench of a world force applied at a world point."""
    rt = np.swapaxes(rot, -1, -2)
    f_b = _mv(rt, force_w)
    r_b = _mv(rt, point_w - origin)
    return np.concatenate([cross(r_b, f_b), f_b], -1)


def ground_contact(model: ArticulatedModel, pos, rot, vel, contact: ContactParams):
    """Penalty wrenches (E, N, 6) on each part from the two capsule end spheres."""
    ends_b = np.stack([np.zeros_like(model.seg), model.seg], axis=2)          # (E, N, 2, 3)
    ends_w = pos[:, :, None] + np.einsum("enij,enkj->enki", rot, ends_b)
    depth = contact.ground_height + model.radius[..., None] - ends_w[..., 2]
    touching = depth > 0
    if not np.any(touching):
        return np.zeros(pos.shape[:2] + (6,))
    w, vl = vel[..., None, :3], vel[..., None, 3:]
    v_b = vl + cross(w, ends_b)
    v_w = np.einsum("enij,enkj->enki", rot, v_b)
    fn = contact.ground_stiffness * depth - contact.ground_damping * v_w[..., 2]
    fn = np.where(touching, np.maximum(fn, 0.0), 0.0)
    vt = v_w[..., :2]
    speed = np.linalg.norm(vt, axis=-1)
    cap = model.friction[..., None] * fn
    mag = np.minimum(contact.tangential_damping * speed, cap)
    ft = -vt * (mag / np.maximum(speed, 1e-12))[..., None]
    force = np.concatenate([ft, fn[..., None]], -1)
    point = ends_w.copy()
    point[..., 2] = ends_w[..., 2] - model.radius[..., None]
    wrench = _point_wrench(rot[:, :, None], pos[:, :, None], point, force)
    return wrench.sum(axis=2)


def _segment_closest(p1, q1, p2, q2):
    """Closest points between segments p1-q1 and p2-q2 (batched)."""
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a = np.einsum("...i,...i", d1, d1)
    e = np.einsum("...i,...i", d2, d2)
    f = np.einsum("...i,...i", d2, r)
    c = np.einsum("...i,...i", d1, r)
    b = np.einsum("...i,...i", d1, d2)
    denom = a * e - b * b
    s = np.where(denom > 1e-12, np.clip((b * f - c * e) / np.where(denom > 1e-12, denom, 1.0), 0, 1), 0.0)
    t = (b * s + f) / e
    s = np.where(t < 0, np.clip(-c / a, 0, 1), np.where(t > 1, np.clip((b - c) / a, 0, 1), s))
    t = np.clip(t, 0, 1)
    return p1 + d1 * s[..., None], p2 + d2 * t[..., None]


def self_contact(model: ArticulatedModel, pos, rot, vel, contact: ContactParams):
    """Penalty wrenches between non-adjacent capsules."""
    E, N = pos.shape[:2]
    out = np.zeros((E, N, 6))
    if len(model.pairs) == 0:
        return out
    a, b = model.pairs[:, 0], model.pairs[:, 1]
    tips = pos + _mv(rot, model.seg)
    ca, cb = _segment_closest(pos[:, a], tips[:, a], pos[:, b], tips[:, b])
    delta = cb - ca
    dist = np.linalg.norm(delta, axis=-1)
    depth = model.radius[:, a] + model.radius[:, b] - dist
    if not np.any(depth > 0):
        return out
    normal = delta / np.maximum(dist, 1e-9)[..., None]
    contact_pt = 0.5 * (ca + cb)

    def point_vel(k, pt):
        r_b = _mv(np.swapaxes(rot[:, k], -1, -2), pt - pos[:, k])
        v_b = vel[:, k, 3:] + cross(vel[:, k, :3], r_b)
        return _mv(rot[:, k], v_b)

    vn = np.einsum("...i,...i", point_vel(b, contact_pt) - point_vel(a, contact_pt), normal)
    fn = np.where(depth > 0, np.maximum(contact.ground_stiffness * depth - contact.ground_damping * vn, 0.0), 0.0)
    force_b = normal * fn[..., None]
    wa = _point_wrench(rot[:, a], pos[:, a], contact_pt, -force_b)
    wb = _point_wrench(rot[:, b], pos[:, b], contact_pt, force_b)
    np.add.at(out, (slice(None), a), wa)
    np.add.at(out, (slice(None), b), wb)
    return out


# -- dynamics -----------------------------------------------------------------------

def forward_dynamics(model: ArticulatedModel, root_pos, root_quat, root_vel, q, qd, tau,
                     contact: ContactParams | None, params: SimParams):
    """Articulated-body forward dynamics.

    Returns root spatial acceleration (root coordinates), joint accelerations,
    and the world poses used.
    """
    E, N = q.shape[0], model.n_parts
    rel = joint_rotations(model, q)
    pos = np.empty((E, N, 3))
    rot = np.empty((E, N, 3, 3))
    vel = np.empty((E, N, 6))
    bias = np.zeros((E, N, 6))
    xup = [None] * N
    pos[:, 0] = root_pos
    rot[:, 0] = quat_to_mat(root_quat)
    vel[:, 0] = root_vel
    S = np.concatenate([model.axis, np.zeros_like(model.axis)], -1)      # (E, J, 6)
    for i in range(1, N):
        p = model.parent[i]
        R = rel[:, i - 1]
        Et = np.swapaxes(R, -1, -2)
        X = np.zeros((E, 6, 6))
        X[:, :3, :3] = Et
        X[:, 3:, 3:] = Et
        X[:, 3:, :3] = -Et @ skew(model.offset[:, i])
        xup[i] = X
        rot[:, i] = rot[:, p] @ R
        pos[:, i] = pos[:, p] + _mv(rot[:, p], model.offset[:, i])
        vj = S[:, i - 1] * qd[:, i - 1, None]
        vel[:, i] = _mv(X, vel[:, p]) + vj
        bias[:, i] = _crm(vel[:, i], vj)

    g_body = np.einsum("enji,j->eni", rot, np.array([0.0, 0.0, -params.gravity]))
    f_grav = model.mass[..., None] * g_body
    f_ext = np.concatenate([cross(model.com, f_grav), f_grav], -1)
    if contact is not None and contact.enabled:
        f_ext = f_ext + ground_contact(model, pos, rot, vel, contact)
        if contact.self_collision:
            f_ext = f_ext + self_contact(model, pos, rot, vel, contact)

    IA = model.inertia.copy()
    pA = _crf(vel, _mv(model.inertia, vel)) - f_ext
    U = np.empty((E, N, 6))
    D = np.ones((E, N))
    u = np.zeros((E, N))
    for i in range(N - 1, 0, -1):
        p = model.parent[i]
        s = S[:, i - 1]
        Ui = _mv(IA[:, i], s)
        Di = np.einsum("ei,ei->e", s, Ui)
        ui = tau[:, i - 1] - np.einsum("ei,ei->e", s, pA[:, i])
        U[:, i], D[:, i], u[:, i] = Ui, Di, ui
        Ia = IA[:, i] - Ui[:, :, None] * Ui[:, None, :] / Di[:, None, None]
        pa = pA[:, i] + _mv(Ia, bias[:, i]) + Ui * (ui / Di)[:, None]
        Xt = np.swapaxes(xup[i], -1, -2)
        IA[:, p] += Xt @ Ia @ xup[i]
        pA[:, p] += _mv(Xt, pa)

    acc = np.zeros((E, N, 6))
    if not params.fixed_base:
        acc[:, 0] = np.linalg.solve(IA[:, 0], -pA[:, 0][..., None])[..., 0]
    qdd = np.zeros_like(q)
    for i in range(1, N):
        p = model.parent[i]
        a = _mv(xup[i], acc[:, p]) + bias[:, i]
        qdd[:, i - 1] = (u[:, i] - np.einsum("ei,ei->e", U[:, i], a)) / D[:, i]
        acc[:, i] = a + S[:, i - 1] * qdd[:, i - 1, None]
    return acc[:, 0], qdd, pos, rot


def _drift(root_pos, root_quat, root_vel, q, qd, rot0, h):
    # the root velocity is held fixed in world axes while the frame turns, so its body-frame
    # linear part is counter-rotated; a free body in uniform motion is then integrated exactly
    q = q + qd * h
    root_pos = root_pos + _mv(rot0, root_vel[:, 3:]) * h
    turn = quat_exp(root_vel[:, :3] * h)
    root_quat = quat_mul(root_quat, turn)
    root_quat = root_quat / np.linalg.norm(root_quat, axis=-1, keepdims=True)
    root_vel = root_vel.copy()
    root_vel[:, 3:] = _mv(np.swapaxes(quat_to_mat(turn), -1, -2), root_vel[:, 3:])
    return root_pos, root_quat, root_vel, q


def step(state: SimState, model: ArticulatedModel, torques=None, contact: ContactParams | None = None,
         dt: float = 1.0 / 60.0, pd_targets=None, params: SimParams = SimParams()) -> SimState:
    """Advance one control step of ``dt`` split into ``params.substeps`` substeps.

    ``torques`` are applied as given; ``pd_targets`` (if any) add a PD torque
    recomputed every substep. Joint limits act through a stiff penalty torque.
    Environments that produce non-finite values are flagged ``diverged`` and
    frozen at their last finite state.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    E, J = state.q.shape
    applied = np.zeros((E, J)) if torques is None else np.asarray(torques, dtype=float)
    if applied.shape != (E, J):
        raise LayoutMismatch(f"torques have shape {applied.shape}, expected {(E, J)}")
    contact = ContactParams() if contact is None else contact
    h = dt / params.substeps
    q, qd = state.q.copy(), state.qd.copy()
    root_pos, root_quat, root_vel = state.root_pos.copy(), state.root_quat.copy(), state.root_vel.copy()
    fixed = params.fixed_base
    if params.backend == "compiled" and not contact.self_collision:
        from . import _fastsim

        targets = np.zeros((E, J)) if pd_targets is None else np.asarray(pd_targets, dtype=float)
        _fastsim.substeps(model.parent, model.mass, model.com, model.inertia, model.seg, model.radius,
                          model.offset, model.axis, model.friction, model.lo, model.hi, model.stiffness,
                          model.damping, model.max_effort, applied, targets, pd_targets is not None,
                          q, qd, root_pos, root_quat, root_vel, h, params.substeps, params.gravity,
                          params.limit_stiffness, params.limit_damping, fixed, contact.enabled,
                          contact.ground_stiffness, contact.ground_damping, contact.tangential_damping,
                          contact.ground_height)
    else:
        q, qd, root_pos, root_quat, root_vel = _substeps_numpy(
            model, q, qd, root_pos, root_quat, root_vel, applied, pd_targets, contact, params, h)
    return _finish(state, model, q, qd, root_pos, root_quat, root_vel, dt)


def _substeps_numpy(model, q, qd, root_pos, root_quat, root_vel, applied, pd_targets, contact, params, h):
    fixed = params.fixed_base
    for _ in range(params.substeps):
        rot0 = quat_to_mat(root_quat)
        if fixed:
            q = q + qd * (0.5 * h)
        else:
            root_pos, root_quat, root_vel, q = _drift(root_pos, root_quat, root_vel, q, qd, rot0, 0.5 * h)
        tau = applied + limit_torque(model, q, qd, params)
        if pd_targets is not None:
            tau = tau + pd_torque(pd_targets, q, qd, model.stiffness, model.damping, model.max_effort)
        a0, qdd, _, _ = forward_dynamics(model, root_pos, root_quat, root_vel, q, qd, tau, contact, params)
        qd = qd + qdd * h
        if fixed:
            q = q + qd * (0.5 * h)
        else:
            # body-frame acceleration plus the transport term gives the world-axes rate
            a0 = a0.copy()
            a0[:, 3:] += cross(root_vel[:, :3], root_vel[:, 3:])
            root_vel = root_vel + a0 * h
            rot_half = quat_to_mat(root_quat)
            root_pos, root_quat, root_vel, q = _drift(root_pos, root_quat, root_vel, q, qd, rot_half, 0.5 * h)
    return q, qd, root_pos, root_quat, root_vel


def _finish(state, model, q, qd, root_pos, root_quat, root_vel, dt) -> SimState:
    finite = (np.isfinite(q).all(1) & np.isfinite(qd).all(1) & np.isfinite(root_pos).all(1)
              & np.isfinite(root_quat).all(1) & np.isfinite(root_vel).all(1))
    bad = ~finite | state.diverged
    if np.any(bad):
        q[bad], qd[bad] = state.q[bad], state.qd[bad]
        root_pos[bad], root_quat[bad], root_vel[bad] = state.root_pos[bad], state.root_quat[bad], state.root_vel[bad]
    pos, rot = forward_kinematics(model, root_pos, root_quat, q)
    return SimState(q=q, qd=qd, root_pos=root_pos, root_quat=root_quat, root_vel=root_vel, t=state.t + dt,
                    prev_action=state.prev_action.copy(), body_pos=pos, body_rot=rot,
                    init_height=state.init_height.copy(), diverged=bad)


def mechanical_energy(model: ArticulatedModel, state: SimState, params: SimParams = SimParams()) -> np.ndarray:
    """Kinetic plus gravitational potential energy per environment."""
    E, N = state.q.shape[0], model.n_parts
    rel = joint_rotations(model, state.q)
    vel = np.empty((E, N, 6))
    vel[:, 0] = state.root_vel if not params.fixed_base else 0.0
    for i in range(1, N):
        p = model.parent[i]
        Et = np.swapaxes(rel[:, i - 1], -1, -2)
        w = _mv(Et, vel[:, p, :3])
        v = _mv(Et, vel[:, p, 3:] + cross(vel[:, p, :3], model.offset[:, i]))
        vel[:, i, :3] = w + model.axis[:, i - 1] * state.qd[:, i - 1, None]
        vel[:, i, 3:] = v
    kinetic = 0.5 * np.einsum("eni,eni->e", vel, _mv(model.inertia, vel))
    com_w = state.body_pos + _mv(state.body_rot, model.com)
    potential = params.gravity * np.einsum("en,en->e", model.mass, com_w[..., 2])
    return kinetic + potential


# -- observation and termination --------------------------------------------------------

FORWARD = np.array([0.0, 1.0, 0.0])
UP = np.array([0.0, 0.0, 1.0])


@dataclass
class Observation:
    s_m: np.ndarray     # (E, dm) morphology, constant within an episode
    s_p: np.ndarray     # (E, dp) perception
    s_g: np.ndarray     # (E, dg) global task state

    def flat(self) -> np.ndarray:
        return np.concatenate([self.s_m, self.s_p, self.s_g], axis=1)


def morphology_features(model: ArticulatedModel) -> np.ndarray:
    """Per part length, radius, density, init_dir, attach_pos; per joint axis and range."""
    E = model.n_envs
    lengths = np.linalg.norm(model.seg, axis=-1)
    dirs = model.seg / lengths[..., None]
    density = model.mass / np.asarray(capsule_mass_volume(lengths, model.radius))
    attach = np.zeros((E, model.n_parts))
    for i in range(1, model.n_parts):
        plen = lengths[:, model.parent[i]]
        attach[:, i] = np.linalg.norm(model.offset[:, i], axis=-1) / plen
    per_part = np.concatenate([lengths[..., None], model.radius[..., None], density[..., None],
                               dirs, attach[..., None]], -1).reshape(E, -1)
    per_joint = np.concatenate([model.axis, model.lo[..., None], model.hi[..., None]], -1).reshape(E, -1)
    return np.concatenate([per_part, per_joint], 1)


def capsule_mass_volume(length, radius):
    return np.pi * radius ** 2 * length + (4.0 / 3.0) * np.pi * radius ** 3


def normalize_joint_pos(q, lo, hi):
    """Affine map of each joint range onto [-1, 1]."""
    return (2 * q - lo - hi) / (hi - lo)


def observe(state: SimState, model: ArticulatedModel, target_point=(0.0, 10.0, 0.0),
            s_m: np.ndarray | None = None) -> Observation:
    if s_m is None:
        s_m = morphology_features(model)
    E, N = state.q.shape[0], model.n_parts
    R0 = state.body_rot[:, 0]
    R0t = np.swapaxes(R0, -1, -2)
    rel_pos = _mv(R0t[:, None], state.body_pos[:, 1:] - state.body_pos[:, :1])
    rel_rot = R0t[:, None] @ state.body_rot[:, 1:]
    rel_quat = mat_to_quat(rel_rot)
    s_p = np.concatenate([
        state.root_pos[:, 2:3],
        state.root_quat,
        rel_pos.reshape(E, -1),
        rel_quat.reshape(E, -1),
        np.clip(normalize_joint_pos(state.q, model.lo, model.hi), -1.0, 1.0),
        state.qd,
        state.root_vel[:, 3:],
        state.root_vel[:, :3],
        state.prev_action,
    ], 1)
    target = np.asarray(target_point, dtype=float)
    dist = np.linalg.norm(target[:2] - state.root_pos[:, :2], axis=1, keepdims=True)
    s_g = np.concatenate([dist, heading(state), up_vector(state)], 1)
    return Observation(s_m, s_p, s_g)


def heading(state: SimState) -> np.ndarray:
    return _mv(state.body_rot[:, 0], FORWARD)


def up_vector(state: SimState) -> np.ndarray:
    return _mv(state.body_rot[:, 0], UP)


class Termination(enum.IntEnum):
    NONE = 0
    FLIPPED = 1
    WRONG_DIRECTION = 2
    LEFT_SCENE = 3
    FELL = 4
    DIVERGED = 5


@dataclass(frozen=True)
class TerminationLimits:
    flip_threshold: float = 0.2
    direction_threshold: float = -0.5
    fall_fraction: float = 0.2
    scene_x: float = 3.0
    scene_y_min: float = -1.0


def terminated(state: SimState, model: ArticulatedModel | None = None,
               limits: TerminationLimits = TerminationLimits()):
    """Boolean mask and per-environment ``Termination`` reason codes."""
    reason = np.full(state.q.shape[0], Termination.NONE, dtype=int)
    up = up_vector(state)[:, 2]
    head = heading(state)[:, 1]
    x, y, z = state.root_pos[:, 0], state.root_pos[:, 1], state.root_pos[:, 2]
    checks = [
        (state.diverged, Termination.DIVERGED),
        (z < limits.fall_fraction * state.init_height, Termination.FELL),
        ((np.abs(x) > limits.scene_x) | (y < limits.scene_y_min), Termination.LEFT_SCENE),
        (head < limits.direction_threshold, Termination.WRONG_DIRECTION),
        (up < limits.flip_threshold, Termination.FLIPPED),
    ]
    # later entries win, so the most specific reason (divergence) is listed first and applied last
    for mask, code in reversed(checks):
        reason = np.where(mask, int(code), reason)
    return reason != Termination.NONE, reason


def write_trajectory(path, rows: list[SimState], env: int = 0) -> None:
    """CSV dump of one environment: t, root pose, q, qdot per row."""
    if not rows:
        return
    J = rows[0].q.shape[1]
    header = (["t", "x", "y", "z", "qw", "qx", "qy", "qz"]
              + [f"q{j}" for j in range(J)] + [f"qd{j}" for j in range(J)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in rows:
            w.writerow([repr(float(v)) for v in np.concatenate(
                [[s.t[env]], s.root_pos[env], s.root_quat[env], s.q[env], s.qd[env]])])
