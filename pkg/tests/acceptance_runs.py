"""End-to-end runs on the shipped reference config, shared by the acceptance tests.

One seed produces a trained baseline, an evolution run with and without
mutation, a fixed-torso evolution run and a warm-start versus cold-start
transfer comparison. Results are plain dicts so they can be cached as JSON.

Run directly to compute every seed and print the summary:

    python tests/acceptance_runs.py
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from codesign.cli import load_experiment
from codesign.evolution import Baseline, EvoConfig, run_evolution, train_baseline
from codesign.morphology import apply_gene, constraint_spec, load_agent, load_constraints, sample_variants
from codesign.ppo import train_generation

ROOT = Path(__file__).resolve().parents[1]
REFERENCE = ROOT / "src" / "codesign" / "data" / "reference.yaml"
SEEDS = (0, 1, 2, 3, 4)
COLD_BUDGET = 200   # epochs a cold-start run may take before it counts as never reaching the target
TARGET_WINDOW = 10  # final baseline epochs averaged into the transfer target


class _Reached(Exception):
    pass


def code_fingerprint() -> str:
    """Hash of the package sources, this file and the reference data."""
    h = hashlib.sha256()
    files = sorted((ROOT / "src" / "codesign").rglob("*.py")) + sorted((ROOT / "src" / "codesign" / "data").glob("*.yaml"))
    for f in files + [Path(__file__).resolve()]:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def fixed_torso(cs, template):
    """The reference constraints with every torso attribute frozen at its template value."""
    import yaml

    raw = yaml.safe_load(Path(cs).read_text())
    entries = list(raw.get("entries") or []) + [{"path": f"{template.root}.*", "fixed": True}]
    return constraint_spec(template, entries, float(raw.get("global_change", 0.2)))


def epochs_to_reach(curve, target) -> int:
    """1-based epoch at which ``curve`` first reaches ``target``; len(curve) + 1 if it never does."""
    for k, v in enumerate(curve):
        if v >= target:
            return k + 1
    return len(curve) + 1


def _curve_until(agents, template, base, tc, ec, rng, target, budget):
    curve = []

    def cb(learner, log):
        curve.append(log.mean_reward)
        if log.mean_reward >= target:
            raise _Reached

    try:
        train_generation(agents, template, base, tc, ec, rng, epochs=budget, callback=cb)
    except _Reached:
        pass
    return curve


def run_seed(seed: int, log=print) -> dict:
    exp = load_experiment(REFERENCE, seed=seed)
    template = load_agent(exp.agent)
    cs = load_constraints(exp.constraints, template)
    tc, ec, evo = exp.train, exp.env, exp.evolution
    t0 = time.time()

    baseline = train_baseline(template, tc, ec, np.random.default_rng([seed, 0]))
    log(f"seed {seed}: baseline fitness {baseline.fitness:.2f} ({time.time() - t0:.0f}s)")

    def evolve(cfg, constraints, stream):
        recs = run_evolution(template, constraints, cfg, tc, ec, np.random.default_rng([seed, stream]),
                             baseline=Baseline(baseline.learner, baseline.fitness, baseline.curve))
        return {"best": [r.best_fitness for r in recs], "mean": [r.mean_fitness for r in recs],
                "change": [r.actual_change for r in recs], "policy": [r.policy_source for r in recs]}

    full = evolve(evo, cs, 1)
    log(f"seed {seed}: evolved best {full['best'][-1]:.2f} ({time.time() - t0:.0f}s)")
    no_mut = evolve(dataclasses.replace(evo, mutation_prob=0.0), cs, 1)
    log(f"seed {seed}: no-mutation best {no_mut['best'][-1]:.2f} ({time.time() - t0:.0f}s)")
    torso = evolve(evo, fixed_torso(exp.constraints, template), 2)
    log(f"seed {seed}: fixed-torso best {torso['best'][-1]:.2f} ({time.time() - t0:.0f}s)")

    # transfer: one sampled generation trained from the baseline policy and from scratch
    target = float(np.mean(baseline.curve[-TARGET_WINDOW:]))
    genes = sample_variants(template, cs, evo.population, np.random.default_rng([seed, 3]))
    agents = [apply_gene(template, g) for g in genes]
    warm = _curve_until(agents, template, baseline.learner, tc, ec, np.random.default_rng([seed, 4]),
                        target, COLD_BUDGET)
    cold = _curve_until(agents, template, None, tc, ec, np.random.default_rng([seed, 4]), target, COLD_BUDGET)
    n_warm = len(warm) if warm and warm[-1] >= target else COLD_BUDGET + 1
    n_cold = len(cold) if cold and cold[-1] >= target else COLD_BUDGET + 1
    log(f"seed {seed}: transfer target {target:.2f}, warm {n_warm} epochs, cold {n_cold} epochs "
        f"({time.time() - t0:.0f}s)")

    return {"seed": seed, "baseline_fitness": baseline.fitness, "baseline_curve": list(baseline.curve),
            "evolve": full, "no_mutation": no_mut, "fixed_torso": torso,
            "transfer": {"target": target, "warm_epochs": n_warm, "cold_epochs": n_cold,
                         "warm_curve": warm, "cold_curve": cold},
            "wall": time.time() - t0}


def load_or_run(cache_dir: Path, seeds=SEEDS, log=print) -> list[dict]:
    """Per-seed results, recomputed whenever the code fingerprint changes."""
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = code_fingerprint()
    out = []
    for seed in seeds:
        path = cache_dir / f"seed{seed}-{key}.json"
        if path.exists():
            out.append(json.loads(path.read_text()))
            continue
        res = run_seed(seed, log)
        path.write_text(json.dumps(res))
        out.append(res)
    return out


if __name__ == "__main__":
    cache = ROOT / ".acceptance_cache"
    seeds = tuple(int(s) for s in sys.argv[1:]) or SEEDS
    for r in load_or_run(cache, seeds, log=lambda m: print(m, flush=True)):
        print(json.dumps({k: r[k] for k in ("seed", "baseline_fitness", "wall")}),
              [round(x, 1) for x in r["evolve"]["best"]])
