"""Agent structure: capsule parts joined by hinges, and the flat gene view of it.

An agent is a tree of capsules rooted at the torso ``B`` part. Every part
frame sits at the attachment point on its parent; the capsule runs from the
frame origin along ``init_dir`` for ``length`` metres. The gene is the flat
vector of evolvable scalars in canonical depth-first order.
"""

from __future__ import annotations

import fnmatch
import math
import os
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import yaml

from .errors import (
    BadUnitVector,
    ConfigEmpty,
    CycleDetected,
    DisconnectedPart,
    EmptyFeasibleInterval,
    LayoutMismatch,
    MorphologyError,
    NonPositiveDimension,
)

UNIT_TOL = 1e-9

PART_ATTRS = ("length", "radius", "density", "attach_pos",
              "init_dir.x", "init_dir.y", "init_dir.z")
JOINT_ATTRS = ("stiffness", "damping", "max_effort")

_ID_RE = re.compile(r"^[A-Za-z0-9_]+$")
_CLASS_RE = re.compile(r"^(B|LL\d+|RL\d+)$")


def _unit(v, what: str) -> tuple[float, float, float]:
    arr = np.asarray(v, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise BadUnitVector(f"{what}: expected a finite 3-vector, got {v!r}")
    if abs(float(np.linalg.norm(arr)) - 1.0) > UNIT_TOL:
        raise BadUnitVector(f"{what}: |v| = {np.linalg.norm(arr):.12g}, expected 1")
    return (float(arr[0]), float(arr[1]), float(arr[2]))


def normalized(v, what: str = "vector") -> tuple[float, float, float]:
    """Scale a nonzero finite 3-vector to unit length."""
    arr = np.asarray(v, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise BadUnitVector(f"{what}: expected a finite 3-vector, got {v!r}")
    n = float(np.linalg.norm(arr))
    if n == 0.0:
        raise BadUnitVector(f"{what}: zero vector has no direction")
    if abs(n - 1.0) <= 1e-15:
        return (float(arr[0]), float(arr[1]), float(arr[2]))
    arr = arr / n
    return (float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class BodyPart:
    id: str
    part_class: str
    length: float
    radius: float
    density: float
    attach_pos: float = 0.0
    init_dir: tuple[float, float, float] = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if not _ID_RE.match(self.id):
            raise MorphologyError(f"bad part id {self.id!r}")
        if not _CLASS_RE.match(self.part_class):
            raise MorphologyError(f"part {self.id}: bad class {self.part_class!r}")
        for name in ("length", "radius", "density"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise NonPositiveDimension(f"part {self.id}: {name} = {val!r} must be > 0")
        if not (0.0 <= self.attach_pos <= 1.0):
            raise MorphologyError(f"part {self.id}: attach_pos {self.attach_pos!r} outside [0, 1]")
        object.__setattr__(self, "init_dir", _unit(self.init_dir, f"part {self.id} init_dir"))

    @property
    def mass(self) -> float:
        return capsule_mass(self.length, self.radius, self.density)


@dataclass(frozen=True)
class Joint:
    parent: str
    child: str
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    range: tuple[float, float] = (-1.0, 1.0)
    stiffness: float = 0.0
    damping: float = 0.0
    max_effort: float = 1.0
    friction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "axis", _unit(self.axis, f"joint {self.id} axis"))
        lo, hi = (float(x) for x in self.range)
        object.__setattr__(self, "range", (lo, hi))
        if not lo < hi:
            raise MorphologyError(f"joint {self.id}: range lo {lo} must be < hi {hi}")
        if self.stiffness < 0 or self.damping < 0:
            raise MorphologyError(f"joint {self.id}: stiffness and damping must be >= 0")
        if not self.max_effort > 0:
            raise NonPositiveDimension(f"joint {self.id}: max_effort must be > 0")
        if self.friction < 0:
            raise MorphologyError(f"joint {self.id}: friction must be >= 0")

    @property
    def id(self) -> str:
        return f"{self.parent}-{self.child}"


@dataclass(frozen=True)
class AgentGraph:
    parts: tuple[BodyPart, ...]
    joints: tuple[Joint, ...]
    root: str
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        object.__setattr__(self, "joints", tuple(self.joints))
        _check_tree(self.parts, self.joints, self.root)
        object.__setattr__(self, "_index", {p.id: p for p in self.parts})

    def part(self, pid: str) -> BodyPart:
        return self._index[pid]

    def parent_joint(self, pid: str) -> Joint | None:
        for j in self.joints:
            if j.child == pid:
                return j
        return None

    def child_joints(self, pid: str) -> list[Joint]:
        return [j for j in self.joints if j.parent == pid]

    def dfs_order(self) -> list[str]:
        """Part ids depth-first from the root, children in declaration order."""
        order = []
        stack = [self.root]
        while stack:
            pid = stack.pop()
            order.append(pid)
            stack.extend(reversed([j.child for j in self.child_joints(pid)]))
        return order

    def topology(self) -> tuple:
        """Hashable signature of the tree shape, ignoring attribute values."""
        return (self.root, tuple((j.parent, j.child) for j in self.ordered_joints()))

    def ordered_joints(self) -> list[Joint]:
        """Joints in the order their child parts appear in ``dfs_order``."""
        return [self.parent_joint(pid) for pid in self.dfs_order()[1:]]

    def canonical(self) -> "AgentGraph":
        """Same agent with parts and joints listed in depth-first order."""
        order = self.dfs_order()
        return AgentGraph(tuple(self.part(p) for p in order), tuple(self.ordered_joints()), self.root)

    @property
    def total_mass(self) -> float:
        return sum(p.mass for p in self.parts)


def _check_tree(parts: Sequence[BodyPart], joints: Sequence[Joint], root: str) -> None:
    ids = [p.id for p in parts]
    if len(set(ids)) != len(ids):
        raise MorphologyError("duplicate part ids")
    known = set(ids)
    if root not in known:
        raise MorphologyError(f"root {root!r} is not a part")
    children: dict[str, list[str]] = {pid: [] for pid in ids}
    for j in joints:
        for end in (j.parent, j.child):
            if end not in known:
                raise MorphologyError(f"joint {j.id} references unknown part {end!r}")
        children[j.parent].append(j.child)

    # iterative three-colour DFS over every node catches cycles anywhere
    colour = dict.fromkeys(ids, 0)
    for start in ids:
        if colour[start]:
            continue
        stack = [(start, iter(children[start]))]
        colour[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = 2
                stack.pop()
            elif colour[nxt] == 1:
                raise CycleDetected(f"cycle through {nxt!r}")
            elif colour[nxt] == 0:
                colour[nxt] = 1
                stack.append((nxt, iter(children[nxt])))

    parent_count = dict.fromkeys(ids, 0)
    for j in joints:
        parent_count[j.child] += 1
    if parent_count[root]:
        raise CycleDetected(f"root {root!r} has a parent joint")
    for pid, n in parent_count.items():
        if n > 1:
            raise MorphologyError(f"part {pid!r} has {n} parent joints")
        if n == 0 and pid != root:
            raise DisconnectedPart(f"part {pid!r} is not connected to the root")


def capsule_mass(length: float, radius: float, density: float) -> float:
    """Mass of a capsule: a cylinder of the given length capped by two hemispheres."""
    for name, val in (("length", length), ("radius", radius), ("density", density)):
        if not val > 0:
            raise NonPositiveDimension(f"{name} = {val!r} must be > 0")
    volume = math.pi * radius ** 2 * length + (4.0 / 3.0) * math.pi * radius ** 3
    return density * volume


# -- description files ------------------------------------------------------

def build_graph(description) -> AgentGraph:
    """Parse an agent description (YAML/JSON text or an already-loaded mapping)."""
    data = yaml.safe_load(description) if isinstance(description, str) else description
    if not isinstance(data, dict) or not data.get("parts"):
        raise MorphologyError("description must be a mapping with a non-empty 'parts' list")
    parts = []
    for entry in data["parts"]:
        entry = dict(entry)
        if "init_dir" in entry:
            entry["init_dir"] = normalized(entry["init_dir"], f"part {entry.get('id')} init_dir")
        parts.append(BodyPart(**entry))
    joints = []
    for entry in data.get("joints") or []:
        entry = dict(entry)
        if "axis" in entry:
            entry["axis"] = normalized(entry["axis"], f"joint {entry.get('child')} axis")
        if "range" in entry:
            entry["range"] = tuple(entry["range"])
        joints.append(Joint(**entry))
    root = data.get("root", parts[0].id)
    return AgentGraph(tuple(parts), tuple(joints), root)


def load_agent(path) -> AgentGraph:
    with open(path, encoding="utf-8") as fh:
        return build_graph(fh.read())


def describe(agent: AgentGraph) -> str:
    """Serialize an agent to description text; ``build_graph`` inverts it exactly."""
    doc = {
        "root": agent.root,
        "parts": [
            {
                "id": p.id,
                "part_class": p.part_class,
                "length": p.length,
                "radius": p.radius,
                "density": p.density,
                "attach_pos": p.attach_pos,
                "init_dir": list(p.init_dir),
            }
            for p in agent.parts
        ],
        "joints": [
            {
                "parent": j.parent,
                "child": j.child,
                "axis": list(j.axis),
                "range": list(j.range),
                "stiffness": j.stiffness,
                "damping": j.damping,
                "max_effort": j.max_effort,
                "friction": j.friction,
            }
            for j in agent.joints
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


# -- genotype ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Gene:
    values: np.ndarray
    layout: tuple[tuple[str, str], ...]

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "layout", tuple(tuple(x) for x in self.layout))
        if vals.ndim != 1 or len(vals) != len(self.layout):
            raise LayoutMismatch(f"{len(vals)} values for a layout of {len(self.layout)}")

    def __eq__(self, other):
        if not isinstance(other, Gene):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __len__(self):
        return len(self.values)

    @property
    def paths(self) -> list[str]:
        return [f"{owner}.{attr}" for owner, attr in self.layout]

    def with_values(self, values) -> "Gene":
        return Gene(np.asarray(values, dtype=float), self.layout)


def gene_layout(agent: AgentGraph) -> tuple[tuple[str, str], ...]:
    layout = []

    def visit(pid):
        attrs = PART_ATTRS if pid != agent.root else tuple(a for a in PART_ATTRS if a != "attach_pos")
        layout.extend((pid, a) for a in attrs)
        for j in agent.child_joints(pid):
            layout.extend((j.id, a) for a in JOINT_ATTRS)
            visit(j.child)

    visit(agent.root)
    return tuple(layout)


def _read_attr(obj, attr: str) -> float:
    if attr.startswith("init_dir."):
        return obj.init_dir["xyz".index(attr[-1])]
    return float(getattr(obj, attr))


def flatten_gene(agent: AgentGraph) -> Gene:
    layout = gene_layout(agent)
    joints = {j.id: j for j in agent.joints}
    values = [
        _read_attr(joints[owner] if owner in joints else agent.part(owner), attr)
        for owner, attr in layout
    ]
    return Gene(np.array(values), layout)


def apply_gene(template: AgentGraph, gene: Gene) -> AgentGraph:
    """Rebuild ``template`` with the attribute values carried by ``gene``."""
    layout = gene_layout(template)
    if gene.layout != layout:
        raise LayoutMismatch("gene layout does not match the template topology")
    updates: dict[str, dict] = {}
    for (owner, attr), val in zip(layout, gene.values):
        upd = updates.setdefault(owner, {})
        if attr.startswith("init_dir."):
            upd.setdefault("_dir", [None, None, None])["xyz".index(attr[-1])] = float(val)
        else:
            upd[attr] = float(val)
    parts = []
    for p in template.parts:
        upd = dict(updates.get(p.id, {}))
        if "_dir" in upd:
            upd["init_dir"] = tuple(upd.pop("_dir"))
        parts.append(replace(p, **upd))
    joints = [replace(j, **updates.get(j.id, {})) for j in template.joints]
    return AgentGraph(tuple(parts), tuple(joints), template.root)


# -- constraints --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """Effective per-attribute bounds for one template gene.

    ``lo``/``hi`` already include the global change band, so every consumer
    (sampling, mutation, validation) reads a single interval per attribute.
    """

    layout: tuple[tuple[str, str], ...]
    template: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    fixed: np.ndarray
    groups: tuple[tuple[int, ...], ...] = ()
    global_change: float = 0.0

    def __post_init__(self):
        n = len(self.layout)
        for name in ("template", "lo", "hi", "fixed"):
            arr = np.array(getattr(self, name), dtype=bool if name == "fixed" else float)
            if arr.shape != (n,):
                raise LayoutMismatch(f"constraint field {name} has shape {arr.shape}, expected ({n},)")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if np.any(self.lo > self.hi):
            bad = int(np.argmax(self.lo > self.hi))
            raise EmptyFeasibleInterval(f"empty interval for {self.path(bad)}")
        if np.any(self.fixed & (self.lo != self.hi)):
            raise MorphologyError("fixed attributes need a degenerate interval")
        for group in self.groups:
            if len({(self.lo[i], self.hi[i], bool(self.fixed[i])) for i in group}) != 1:
                raise MorphologyError(f"linked group {self.group_paths(group)} has differing intervals")

    def path(self, i: int) -> str:
        owner, attr = self.layout[i]
        return f"{owner}.{attr}"

    def group_paths(self, group) -> list[str]:
        return [self.path(i) for i in group]

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def group_of(self) -> np.ndarray:
        """Group index for each attribute, -1 where unlinked."""
        out = np.full(len(self.layout), -1, dtype=int)
        for g, group in enumerate(self.groups):
            out[list(group)] = g
        return out

    def direction_triples(self) -> list[tuple[int, int, int]]:
        idx = {key: i for i, key in enumerate(self.layout)}
        triples = []
        for owner, attr in self.layout:
            if attr == "init_dir.x":
                triples.append(tuple(idx[(owner, f"init_dir.{c}")] for c in "xyz"))
        return triples


_DOMAINS = {
    "attach_pos": (0.0, 1.0),
    "init_dir.x": (-1.0, 1.0),
    "init_dir.y": (-1.0, 1.0),
    "init_dir.z": (-1.0, 1.0),
    "stiffness": (0.0, np.inf),
    "damping": (0.0, np.inf),
}
_POSITIVE = ("length", "radius", "density", "max_effort")


def constraint_spec(template: Gene | AgentGraph, entries: Iterable[dict] = (),
                    global_change: float = 0.2) -> ConstraintSpec:
    """Build effective bounds from constraint-file entries.

    Each entry has ``path`` (glob over ``owner.attr`` paths), optional
    ``min``/``max`` in absolute units, ``fixed`` and ``group``. Every
    attribute is additionally limited to ``template * (1 +- global_change)``.
    """
    gene = flatten_gene(template) if isinstance(template, AgentGraph) else template
    if global_change < 0:
        raise MorphologyError("global_change must be >= 0")
    v = gene.values
    band_lo = np.minimum(v * (1 - global_change), v * (1 + global_change))
    band_hi = np.maximum(v * (1 - global_change), v * (1 + global_change))
    # keep the band inside each attribute's physical domain
    for i, (_, attr) in enumerate(gene.layout):
        dom_lo, dom_hi = _DOMAINS.get(attr, (-np.inf, np.inf))
        if attr in _POSITIVE:
            dom_lo = 1e-3 * v[i]
        band_lo[i] = max(band_lo[i], dom_lo)
        band_hi[i] = min(band_hi[i], dom_hi)
    lo, hi = band_lo.copy(), band_hi.copy()
    fixed = np.zeros(len(v), dtype=bool)
    named_groups: dict[str, list[int]] = {}
    paths = gene.paths
    for entry in entries:
        pattern = entry["path"]
        hits = [i for i, p in enumerate(paths) if fnmatch.fnmatchcase(p, pattern)]
        if not hits:
            raise MorphologyError(f"constraint path {pattern!r} matches no attribute")
        for i in hits:
            if entry.get("min") is not None:
                lo[i] = max(band_lo[i], float(entry["min"]))
            if entry.get("max") is not None:
                hi[i] = min(band_hi[i], float(entry["max"]))
            if entry.get("fixed"):
                fixed[i] = True
            if entry.get("group") is not None:
                members = named_groups.setdefault(str(entry["group"]), [])
                if i not in members:
                    members.append(i)
    for i in range(len(v)):
        if lo[i] > hi[i]:
            raise EmptyFeasibleInterval(f"{paths[i]}: constraint and global band do not overlap")
        if not lo[i] <= v[i] <= hi[i]:
            raise EmptyFeasibleInterval(f"{paths[i]}: template value {v[i]} lies outside [{lo[i]}, {hi[i]}]")
    lo[fixed] = v[fixed]
    hi[fixed] = v[fixed]

    groups = []
    for name, members in named_groups.items():
        if len(members) < 2:
            continue
        if len({v[i] for i in members}) != 1:
            raise MorphologyError(f"linked group {name!r} members have different template values")
        if np.any(fixed[members]):
            fixed[members] = True
        g_lo, g_hi = lo[members].max(), hi[members].min()
        if g_lo > g_hi:
            raise EmptyFeasibleInterval(f"linked group {name!r} has no common interval")
        lo[members], hi[members] = g_lo, g_hi
        if np.any(fixed[members]):
            lo[members] = hi[members] = v[members[0]]
        groups.append(tuple(sorted(members)))
    # an attribute in two named groups makes them one group
    groups = _merge_groups(groups)
    return ConstraintSpec(gene.layout, v, lo, hi, fixed, tuple(groups), float(global_change))


def _merge_groups(groups: list[tuple[int, ...]]) -> list[tuple[int, ...]]:
    merged: list[set] = []
    for g in groups:
        g = set(g)
        for other in [m for m in merged if m & g]:
            g |= other
            merged.remove(other)
        merged.append(g)
    return [tuple(sorted(m)) for m in merged]


def load_constraints(text_or_path, template: AgentGraph) -> ConstraintSpec:
    """Constraint spec from a YAML file path or YAML text."""
    if isinstance(text_or_path, os.PathLike) or (
            isinstance(text_or_path, str) and "\n" not in text_or_path and not text_or_path.lstrip().startswith("{")):
        with open(text_or_path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    else:
        data = yaml.safe_load(text_or_path)
    data = data or {}
    return constraint_spec(template, data.get("entries") or [], float(data.get("global_change", 0.2)))


@dataclass(frozen=True)
class Violation:
    index: int
    path: str
    kind: str
    detail: str


def validate_constraints(gene: Gene, constraints: ConstraintSpec) -> list[Violation]:
    """Every way ``gene`` breaks ``constraints``; an empty list means it is feasible."""
    if gene.layout != constraints.layout:
        raise LayoutMismatch("gene and constraint layouts differ")
    v = gene.values
    out = []
    for i in range(len(v)):
        if constraints.fixed[i]:
            if v[i] != constraints.template[i]:
                out.append(Violation(i, constraints.path(i), "fixed_modified",
                                     f"{v[i]!r} != template {constraints.template[i]!r}"))
        elif not constraints.lo[i] <= v[i] <= constraints.hi[i]:
            out.append(Violation(i, constraints.path(i), "out_of_range",
                                 f"{v[i]!r} not in [{constraints.lo[i]!r}, {constraints.hi[i]!r}]"))
    for group in constraints.groups:
        if len({v[i] for i in group}) > 1:
            out.append(Violation(group[0], constraints.path(group[0]), "linked_unequal",
                                 f"group {constraints.group_paths(group)} = {[v[i] for i in group]}"))
    for tri in constraints.direction_triples():
        n = float(np.linalg.norm(v[list(tri)]))
        if abs(n - 1.0) > UNIT_TOL:
            out.append(Violation(tri[0], constraints.path(tri[0]), "non_unit_direction", f"|dir| = {n!r}"))
    return out


def repair_directions(values: np.ndarray, constraints: ConstraintSpec, fallback: np.ndarray) -> np.ndarray:
    """Renormalize direction triples; revert any that cannot be made feasible.

    Reverting copies ``fallback`` (a feasible gene) for the triple and for
    everything linked to it, so linked groups stay equal.
    """
    values = np.array(values, dtype=float)
    lo, hi = constraints.lo, constraints.hi
    bad: set[int] = set()
    for tri in constraints.direction_triples():
        idx = list(tri)
        d = values[idx]
        n = float(np.linalg.norm(d))
        if abs(n - 1.0) <= 1e-12:
            ok = bool(np.all((lo[idx] <= d) & (d <= hi[idx])))
        elif n == 0.0 or not np.isfinite(n):
            ok = False
        else:
            ok = False
            d = d / n
            for _ in range(20):
                if np.all((lo[idx] <= d) & (d <= hi[idx])):
                    ok = True
                    break
                d = np.clip(d, lo[idx], hi[idx])
                n = float(np.linalg.norm(d))
                if n == 0.0:
                    break
                d = d / n
            if ok:
                values[idx] = d
        if not ok:
            bad.update(idx)
    # renormalizing two triples independently can pull a linked group apart
    for group in constraints.groups:
        if len({values[i] for i in group}) > 1:
            bad.update(group)
    if bad:
        group_of = constraints.group_of()
        triple_of = {i: tri for tri in constraints.direction_triples() for i in tri}
        frontier = set(bad)
        while frontier:
            new = set()
            for i in frontier:
                if group_of[i] >= 0:
                    new.update(constraints.groups[group_of[i]])
                if i in triple_of:
                    new.update(triple_of[i])
            frontier = new - bad
            bad |= new
        idx = sorted(bad)
        values[idx] = fallback[idx]
    return values


def sample_variants(template: AgentGraph | Gene, constraints: ConstraintSpec, n: int,
                    rng: np.random.Generator) -> list[Gene]:
    """Draw ``n`` genes uniformly inside the constraint box around the template."""
    if n < 1:
        raise ValueError("n must be >= 1")
    base = flatten_gene(template) if isinstance(template, AgentGraph) else template
    if base.layout != constraints.layout:
        raise LayoutMismatch("template and constraint layouts differ")
    if np.any(constraints.lo > constraints.hi):
        raise EmptyFeasibleInterval("constraint spec has an empty interval")
    genes = []
    for _ in range(n):
        vals = rng.uniform(constraints.lo, constraints.hi)
        for group in constraints.groups:
            vals[list(group)] = vals[group[0]]
        vals[constraints.fixed] = base.values[constraints.fixed]
        vals = repair_directions(vals, constraints, base.values)
        genes.append(base.with_values(vals))
    return genes


# -- random generation ----------------------------------------------------------

@dataclass
class RandomAgentConfig:
    body_parts: tuple[int, int] = (1, 4)
    leg_pairs: tuple[int, int] = (1, 3)
    segments_per_leg: int = 2
    body_length: tuple[float, float] = (0.25, 0.45)
    body_radius: tuple[float, float] = (0.08, 0.12)
    leg_length: tuple[float, float] = (0.25, 0.45)
    leg_radius: tuple[float, float] = (0.04, 0.07)
    density: tuple[float, float] = (800.0, 1200.0)
    stiffness: tuple[float, float] = (80.0, 200.0)
    damping: tuple[float, float] = (4.0, 10.0)
    max_effort: tuple[float, float] = (30.0, 80.0)
    joint_range: tuple[float, float] = (-0.8, 0.8)
    body_joint_range: tuple[float, float] = (-0.3, 0.3)
    leg_splay: tuple[float, float] = (0.2, 0.6)


LEG_AXIS = (1.0, 0.0, 0.0)


def _mirror_axis(axis):
    # a hinge axis is a pseudovector: reflecting x flips its y and z parts
    return (axis[0], -axis[1], -axis[2])


def random_agent(cfg: RandomAgentConfig, rng: np.random.Generator) -> AgentGraph:
    """Generate torso parts first, then attach mirrored left/right leg pairs."""
    intervals = {k: getattr(cfg, k) for k in (
        "body_parts", "leg_pairs", "body_length", "body_radius", "leg_length",
        "leg_radius", "density", "stiffness", "damping", "max_effort", "leg_splay")}
    for name, (a, b) in intervals.items():
        if a > b:
            raise ConfigEmpty(f"{name}: empty interval ({a}, {b})")
    if cfg.body_parts[1] < 1 or cfg.segments_per_leg < 1 and cfg.leg_pairs[1] > 0:
        raise ConfigEmpty("config admits no agent")
    n_body = int(rng.integers(max(cfg.body_parts[0], 1), cfg.body_parts[1] + 1))
    n_legs = int(rng.integers(max(cfg.leg_pairs[0], 0), cfg.leg_pairs[1] + 1))

    def u(interval):
        return float(rng.uniform(*interval))

    def joint_attrs():
        return dict(stiffness=u(cfg.stiffness), damping=u(cfg.damping), max_effort=u(cfg.max_effort))

    parts = [BodyPart("B0", "B", u(cfg.body_length), u(cfg.body_radius), u(cfg.density),
                      0.0, (0.0, -1.0, 0.0))]
    joints = []
    for k in range(1, n_body):
        pid = f"B{k}"
        parts.append(BodyPart(pid, "B", u(cfg.body_length), u(cfg.body_radius), u(cfg.density),
                              1.0, (0.0, -1.0, 0.0)))
        joints.append(Joint(f"B{k - 1}", pid, (1.0, 0.0, 0.0), cfg.body_joint_range, **joint_attrs()))

    for k in range(n_legs):
        host = f"B{min(n_body - 1, (k * n_body) // max(n_legs, 1))}"
        attach = u((0.0, 1.0))
        splay = u(cfg.leg_splay)
        length, radius, density = u(cfg.leg_length), u(cfg.leg_radius), u(cfg.density)
        attrs = joint_attrs()
        for side, sign in (("LL", -1.0), ("RL", 1.0)):
            parent = host
            for s in range(cfg.segments_per_leg):
                pid = f"{side}{k}_{s}"
                if s == 0:
                    d = normalized((sign * math.sin(splay), 0.0, -math.cos(splay)))
                else:
                    d = (0.0, 0.0, -1.0)
                parts.append(BodyPart(pid, f"{side}{k}", length, radius, density,
                                      attach if s == 0 else 1.0, d))
                axis = _mirror_axis(LEG_AXIS) if side == "RL" else LEG_AXIS
                joints.append(Joint(parent, pid, axis, cfg.joint_range, **attrs))
                parent = pid
    return AgentGraph(tuple(parts), tuple(joints), "B0")
