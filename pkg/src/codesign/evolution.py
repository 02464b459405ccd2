"""Constrained genetic algorithm over morphology genes, and the co-design loop around it."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import EnvConfig
from .errors import LayoutMismatch, PopulationTooSmall
from .morphology import (AgentGraph, ConstraintSpec, Gene, apply_gene, flatten_gene, repair_directions,
                         sample_variants, validate_constraints)
from .ppo import Learner, TrainConfig, evaluate_many, train_generation, train_single


@dataclass(frozen=True)
class EvoConfig:
    population: int = 16
    select_frac: float = 0.20
    swap_prob: float = 0.5
    mutation_prob: float = 0.01
    r_frac: float = 0.10
    generations: int = 10
    generation_epochs: int = 20
    # keep the previous generation's policy when it scores higher (see run_evolution)
    policy_elitism: bool = True
    patience: int = 0           # 0 disables early stopping
    tol: float = 0.0

    def __post_init__(self):
        if not 0 < self.select_frac < 1:
            raise ValueError("select_frac must lie in (0, 1)")
        for name in ("swap_prob", "mutation_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.population < 1 or self.generations < 0 or self.r_frac < 0:
            raise ValueError("population must be >= 1, generations and r_frac >= 0")


@dataclass
class GenerationRecord:
    index: int
    population: list
    fitness: np.ndarray
    best_gene: Gene
    best_fitness: float
    actual_change: float
    policy_checkpoint: str | None = None
    lr: float = float("nan")
    wall: float = 0.0
    policy_source: str = "trained"
    curve: list = field(default_factory=list)

    @property
    def mean_fitness(self) -> float:
        return float(np.mean(self.fitness))

    @property
    def median_fitness(self) -> float:
        return float(np.median(self.fitness))


def select_top(fitness, p: float) -> np.ndarray:
    """Indices of the ceil(p*n) fittest entries, ties going to the lower index."""
    f = np.asarray(fitness, dtype=float)
    if f.size == 0:
        raise ValueError("fitness is empty")
    k = max(1, math.ceil(p * f.size - 1e-9))
    order = np.lexsort((np.arange(f.size), -f))
    return order[:k]


def swap_units(constraints: ConstraintSpec) -> list[list[int]]:
    """Attribute sets that crossover must move together.

    Linked groups move as one, and so do direction triples (swapping single
    components would break unit length); overlapping sets are merged.
    """
    n = len(constraints.layout)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for s in list(constraints.groups) + constraints.direction_triples():
        for i in s[1:]:
            parent[find(i)] = find(s[0])
    units: dict[int, list[int]] = {}
    for i in range(n):
        if not constraints.fixed[i]:
            units.setdefault(find(i), []).append(i)
    return list(units.values())


def crossover(a: Gene, b: Gene, constraints: ConstraintSpec, rng: np.random.Generator,
              swap_prob: float = 0.5) -> Gene:
    if a.layout != b.layout or a.layout != constraints.layout:
        raise LayoutMismatch("parents and constraints must share a layout")
    child = a.values.copy()
    for unit in swap_units(constraints):
        if rng.random() < swap_prob:
            child[unit] = b.values[unit]
    return a.with_values(child)


def mutation_units(constraints: ConstraintSpec) -> list[list[int]]:
    """Linked groups share one draw; every other free attribute is its own unit."""
    group_of = constraints.group_of()
    units = [list(g) for g in constraints.groups if not constraints.fixed[g[0]]]
    units += [[i] for i in range(len(constraints.layout)) if group_of[i] < 0 and not constraints.fixed[i]]
    return units


def mutate(g: Gene, constraints: ConstraintSpec, cfg: EvoConfig, rng: np.random.Generator) -> Gene:
    if g.layout != constraints.layout:
        raise LayoutMismatch("gene and constraints must share a layout")
    vals = g.values.copy()
    width = constraints.width
    changed = False
    for unit in mutation_units(constraints):
        if rng.random() < cfg.mutation_prob:
            r = cfg.r_frac * width[unit[0]]
            vals[unit] = np.clip(vals[unit] + rng.uniform(-r, r), constraints.lo[unit], constraints.hi[unit])
            changed = True
    if not changed:
        return g
    return g.with_values(repair_directions(vals, constraints, g.values))


def next_generation(record: GenerationRecord, constraints: ConstraintSpec, cfg: EvoConfig,
                    rng: np.random.Generator) -> list[Gene]:
    """Elites unchanged, then offspring of two distinct elites until the population is full."""
    seeds = [record.population[i] for i in select_top(record.fitness, cfg.select_frac)]
    slots = cfg.population - len(seeds)
    if slots > 0 and len(seeds) < 2:
        raise PopulationTooSmall(f"{len(seeds)} seed(s) cannot produce offspring by crossover")
    out = list(seeds[:cfg.population])
    for _ in range(slots):
        i, j = rng.choice(len(seeds), size=2, replace=False)
        child = crossover(seeds[i], seeds[j], constraints, rng, cfg.swap_prob)
        out.append(mutate(child, constraints, cfg, rng))
    return out


def actual_change(baseline: Gene, evolved: Gene, constraints: ConstraintSpec | None = None) -> float:
    """Mean absolute relative deviation from the baseline over evolvable attributes, in percent."""
    if baseline.layout != evolved.layout:
        raise LayoutMismatch("genes have different layouts")
    b, e = baseline.values, evolved.values
    free = np.ones(len(b), dtype=bool) if constraints is None else ~constraints.fixed
    if not free.any():
        return 0.0
    diff = np.abs(e - b)
    scale = np.abs(b)
    if constraints is not None:
        width = np.where(constraints.width > 0, constraints.width, 1.0)
    else:
        width = np.ones_like(b)
    rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), diff / width)
    return float(np.mean(rel[free]) * 100.0)


class FitnessCache:
    """Deterministic fitness per (policy tag, gene values)."""

    def __init__(self):
        self._store: dict[tuple, float] = {}

    def get(self, tag, gene: Gene):
        return self._store.get((tag, gene.values.tobytes()))

    def put(self, tag, genes, fitness) -> None:
        for g, f in zip(genes, fitness):
            self._store[(tag, g.values.tobytes())] = float(f)


def evaluate_population(learner: Learner, tag, genes, template: AgentGraph, env_cfg: EnvConfig,
                        train_cfg: TrainConfig, cache: FitnessCache) -> np.ndarray:
    out = np.array([cache.get(tag, g) if cache.get(tag, g) is not None else np.nan for g in genes])
    todo = [i for i in range(len(genes)) if np.isnan(out[i])]
    if todo:
        agents = [apply_gene(template, genes[i]) for i in todo]
        out[todo] = evaluate_many(learner, agents, template, env_cfg, train_cfg.eval_episodes, train_cfg.eval_seed)
        cache.put(tag, [genes[i] for i in todo], out[todo])
    return out


@dataclass
class Baseline:
    learner: Learner
    fitness: float
    curve: list


def train_baseline(template: AgentGraph, train_cfg: TrainConfig, env_cfg: EnvConfig,
                   rng: np.random.Generator, callback=None) -> Baseline:
    learner, curve, _ = train_single(template, train_cfg, env_cfg, rng, callback=callback)
    fit = evaluate_many(learner, [template], template, env_cfg, train_cfg.eval_episodes, train_cfg.eval_seed)[0]
    return Baseline(learner, float(fit), curve)


def run_evolution(template: AgentGraph, constraints: ConstraintSpec, evo_cfg: EvoConfig, train_cfg: TrainConfig,
                  env_cfg: EnvConfig, rng: np.random.Generator, baseline: Baseline | None = None,
                  on_generation: Callable[[GenerationRecord, Learner], None] | None = None) -> list[GenerationRecord]:
    """Baseline record followed by one record per generation.

    Each generation trains a copy of the incumbent policy on all variants.
    With ``policy_elitism`` the elites are also scored under the incumbent
    policy (their cached fitness from the previous generation); if that
    beats the freshly trained policy, the incumbent policy is kept for the
    record and for warm-starting the next generation. Together with gene
    elitism this makes the best fitness non-decreasing under deterministic
    evaluation.
    """
    t0 = time.time()
    base_gene = flatten_gene(template)
    if base_gene.layout != constraints.layout:
        raise LayoutMismatch("template and constraint layouts differ")
    if baseline is None:
        baseline = train_baseline(template, train_cfg, env_cfg, rng)
    records = [GenerationRecord(0, [base_gene], np.array([baseline.fitness]), base_gene, baseline.fitness, 0.0,
                                lr=baseline.learner.lr, wall=time.time() - t0, policy_source="baseline",
                                curve=list(baseline.curve))]
    if on_generation is not None:
        on_generation(records[0], baseline.learner)
    cache = FitnessCache()
    cache.put(0, [base_gene], [baseline.fitness])
    incumbent, inc_tag = baseline.learner, 0
    population = None
    stale = 0
    for g in range(1, evo_cfg.generations + 1):
        if g == 1:
            # the template is the only member of generation 0, so it is carried over as its elite
            population = [base_gene]
            if evo_cfg.population > 1:
                population += sample_variants(template, constraints, evo_cfg.population - 1, rng)
        else:
            population = next_generation(records[-1], constraints, evo_cfg, rng)
        agents = [apply_gene(template, gene) for gene in population]
        learner, fitness, logs = train_generation(agents, template, incumbent, train_cfg, env_cfg, rng,
                                                  epochs=evo_cfg.generation_epochs)
        cache.put(g, population, fitness)
        source = "trained"
        if evo_cfg.policy_elitism:
            cached = [cache.get(inc_tag, gene) for gene in population]
            known = [f for f in cached if f is not None]
            if known and max(known) > fitness.max():
                fitness = evaluate_population(incumbent, inc_tag, population, template, env_cfg, train_cfg, cache)
                learner, source = incumbent, "kept"
        if source == "trained":
            incumbent, inc_tag = learner, g
        best = int(np.argmax(fitness))
        rec = GenerationRecord(g, population, fitness, population[best], float(fitness[best]),
                               actual_change(base_gene, population[best], constraints), lr=learner.lr,
                               wall=time.time() - t0, policy_source=source, curve=[l.mean_reward for l in logs])
        records.append(rec)
        if on_generation is not None:
            on_generation(rec, incumbent)
        if evo_cfg.patience > 0 and g > 1:
            stale = stale + 1 if rec.best_fitness - records[-2].best_fitness < evo_cfg.tol else 0
            if stale >= evo_cfg.patience:
                break
    return records


HISTORY_HEADER = ["generation", "best", "mean", "median", "actual_change", "lr", "wall", "policy"]


def history_row(rec: GenerationRecord) -> list:
    return [rec.index, rec.best_fitness, rec.mean_fitness, rec.median_fitness, rec.actual_change, rec.lr,
            round(rec.wall, 3), rec.policy_source]


def write_history(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_HEADER)
        for rec in records:
            w.writerow(history_row(rec))


def check_population(population, constraints: ConstraintSpec) -> list:
    """All constraint violations across a population, tagged with the member index."""
    return [(k, v) for k, g in enumerate(population) for v in validate_constraints(g, constraints)]
