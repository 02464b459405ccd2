"""Command-line entry point: train-baseline, evolve, evaluate, export-mjcf."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

EXIT_ERROR = 1
EXIT_MISSING = 2
EXIT_LAYOUT = 3


class MissingPath(Exception):
    pass


@dataclass
class ExperimentConfig:
    agent: Path
    constraints: Path | None
    seed: int
    out: Path
    reward: object
    train: object
    evolution: object
    env: object
    raw: dict = field(default_factory=dict)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPath(f"{what} not found: {path}")
    return path


def _section(cls, values: dict | None):
    """Build a config dataclass, accepting numbers written as strings (e.g. YAML's 1e4)."""
    import dataclasses

    out = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in (values or {}).items():
        if key not in names:
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        out[key] = value
    return cls(**out)


def load_experiment(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    import dataclasses

    import yaml

    from .env import EnvConfig
    from .evolution import EvoConfig
    from .physics import ContactParams, SimParams
    from .ppo import TrainConfig
    from .reward import RewardConfig

    cfg_path = _require(Path(path), "config file")
    raw = yaml.safe_load(cfg_path.read_text()) or {}
    base = cfg_path.parent

    def resolve(p):
        return p if Path(p).is_absolute() else base / p

    agent = _require(Path(resolve(raw["agent"])), "agent description")
    constraints = _require(Path(resolve(raw["constraints"])), "constraint file") if raw.get("constraints") else None
    reward = _section(RewardConfig, raw.get("reward"))
    env = _section(EnvConfig, raw.get("env"))
    env = dataclasses.replace(env, reward=reward, contact=_section(ContactParams, raw.get("contact")),
                              sim=_section(SimParams, raw.get("sim")))
    seed = int(raw.get("seed", 0) if seed is None else seed)
    out_dir = Path(out) if out is not None else Path(raw.get("out", "runs/experiment"))
    raw = dict(raw, seed=seed, out=str(out_dir))
    return ExperimentConfig(agent, constraints, seed, out_dir, reward, _section(TrainConfig, raw.get("train")),
                            _section(EvoConfig, raw.get("evolution")), env, raw)


def write_manifest(out: Path, exp: ExperimentConfig, command: str, extra: dict | None = None) -> None:
    import platform

    import numpy as np
    import yaml

    from . import __version__

    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "argv": sys.argv[1:], "seed": exp.seed, "config": exp.raw,
           "agent": str(exp.agent), "constraints": str(exp.constraints) if exp.constraints else None,
           "versions": {"codesign": __version__, "python": platform.python_version(), "numpy": np.__version__},
           **(extra or {})}
    (out / "manifest.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))


def _plot(path: Path, series: dict, xlabel: str, ylabel: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in series.items():
        ax.plot(x, y, marker="o" if len(x) < 40 else None, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _read_metrics(path: Path) -> list:
    import csv

    from .ppo import EpochLog

    if not path.exists():
        return []
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [EpochLog(int(r["epoch"]), float(r["mean_reward"]), int(r["episodes"]), float(r["kl"]), float(r["lr"]),
                     float(r["clip_frac"]), float(r["policy_loss"]), float(r["value_loss"]), float(r["wall"]))
            for r in rows]


# -- commands ---------------------------------------------------------------------

def cmd_train_baseline(args) -> int:
    import numpy as np

    from .env import VecEnv, morphology_reference
    from .morphology import load_agent
    from .ppo import Learner, evaluate, make_learner, train, write_metrics

    exp = load_experiment(args.config, args.seed, args.out)
    out = exp.out / "baseline"
    out.mkdir(parents=True, exist_ok=True)
    agent = load_agent(exp.agent)
    rng = np.random.default_rng(exp.seed)
    env = VecEnv([agent], exp.train.n_envs, exp.env, rng, morphology_reference(agent))
    ckpt = out / "policy.npz"
    logs = []
    if args.resume and ckpt.exists():
        learner, meta = Learner.load(ckpt, exp.train)
        logs = _read_metrics(out / "metrics.csv")[:learner.epoch]
        rng = np.random.default_rng([exp.seed, learner.epoch])
        env.rng = rng
        print(f"resuming from epoch {learner.epoch}")
    else:
        learner = make_learner(env, exp.train, rng)

    def on_epoch(l, log):
        logs.append(log)
        if exp.train.checkpoint_every and l.epoch % exp.train.checkpoint_every == 0:
            l.save(ckpt, {"seed": exp.seed})
            write_metrics(out / "metrics.csv", logs)
        print(f"epoch {log.epoch:4d}  reward {log.mean_reward:9.3f}  kl {log.kl:.4f}  lr {log.lr:.2e}", flush=True)

    remaining = max(0, exp.train.epochs - learner.epoch)
    train(learner, env, remaining, rng, on_epoch)
    fitness = evaluate(learner, agent, exp.env, exp.train.eval_episodes, exp.train.eval_seed)
    learner.save(ckpt, {"seed": exp.seed, "fitness": fitness})
    write_metrics(out / "metrics.csv", logs)
    if logs:
        _plot(out / "reward_curve.png", {"baseline": ([l.epoch for l in logs], [l.mean_reward for l in logs])},
              "epoch", "mean episode reward", "Baseline training")
    write_manifest(out, exp, "train-baseline", {"fitness": fitness, "epochs": learner.epoch})
    print(f"baseline fitness {fitness:.4f}")
    return 0


def cmd_evolve(args) -> int:
    import numpy as np
    from dataclasses import replace

    from .evolution import HISTORY_HEADER, Baseline, history_row, run_evolution, train_baseline
    from .mjcf import export_mjcf
    from .morphology import apply_gene, describe, load_agent, load_constraints
    from .ppo import Learner, evaluate

    exp = load_experiment(args.config, args.seed, args.out)
    if exp.constraints is None:
        raise MissingPath("config names no constraint file")
    template = load_agent(exp.agent)
    constraints = load_constraints(exp.constraints, template)
    ckpt = exp.out / "baseline" / "policy.npz"
    rng = np.random.default_rng(exp.seed)
    if args.from_scratch or not ckpt.exists():
        if not args.from_scratch:
            raise MissingPath(f"baseline checkpoint not found: {ckpt} (run train-baseline or pass --from-scratch)")
        baseline = train_baseline(template, exp.train, exp.env, rng)
        (exp.out / "baseline").mkdir(parents=True, exist_ok=True)
        baseline.learner.save(ckpt, {"seed": exp.seed, "fitness": baseline.fitness})
    else:
        learner, meta = Learner.load(ckpt, exp.train)
        fit = meta.get("fitness")
        if fit is None:
            fit = evaluate(learner, template, exp.env, exp.train.eval_episodes, exp.train.eval_seed)
        baseline = Baseline(learner, float(fit), [])

    runs = [("evolve", exp.evolution)]
    if args.ablate_mutation:
        runs.append(("evolve_no_mutation", replace(exp.evolution, mutation_prob=0.0)))
    curves = {}
    for name, evo_cfg in runs:
        out = exp.out / name
        out.mkdir(parents=True, exist_ok=True)
        hist = out / "history.csv"
        with open(hist, "w") as fh:
            fh.write(",".join(HISTORY_HEADER) + "\n")

        last = {}

        def on_generation(rec, learner, out=out, hist=hist, last=last):
            last["learner"] = learner
            with open(hist, "a") as fh:
                fh.write(",".join(str(v) for v in history_row(rec)) + "\n")
            gdir = out / f"gen_{rec.index:03d}"
            gdir.mkdir(exist_ok=True)
            agent = apply_gene(template, rec.best_gene)
            (gdir / "best.yaml").write_text(describe(agent))
            (gdir / "best.xml").write_text(export_mjcf(agent))
            print(f"[{out.name}] generation {rec.index:3d}  best {rec.best_fitness:9.3f}  "
                  f"mean {rec.mean_fitness:9.3f}  change {rec.actual_change:5.2f}%  policy {rec.policy_source}",
                  flush=True)

        # both arms of an ablation start from the same random stream
        run_rng = np.random.default_rng([exp.seed, 1])
        records = run_evolution(template, constraints, evo_cfg, exp.train, exp.env, run_rng, baseline, on_generation)
        final = records[-1]
        last["learner"].save(out / "policy.npz", {"seed": exp.seed, "generation": final.index,
                                                  "fitness": final.best_fitness})
        curves[name] = ([r.index for r in records], [r.best_fitness for r in records])
        write_manifest(out, exp, "evolve", {"baseline_fitness": baseline.fitness,
                                            "best_fitness": final.best_fitness,
                                            "mutation_prob": evo_cfg.mutation_prob})
    _plot(exp.out / "evolve" / "reward_vs_generation.png", {"best fitness": curves["evolve"]},
          "generation", "best fitness", "Fitness by generation")
    if args.ablate_mutation:
        _plot(exp.out / "mutation_ablation.png",
              {"with mutation": curves["evolve"], "without mutation": curves["evolve_no_mutation"]},
              "generation", "best fitness", "Mutation ablation")
    return 0


def cmd_evaluate(args) -> int:
    from .env import morphology_reference, rollout_returns
    from .errors import LayoutMismatch
    from .morphology import load_agent
    from .physics import ArticulatedModel, init_sim, observe, write_trajectory
    from .ppo import Learner

    exp = load_experiment(args.config, args.seed, args.out)
    template = load_agent(exp.agent)
    agent = load_agent(_require(Path(args.agent), "agent description")) if args.agent else template
    if agent.topology() != template.topology():
        raise LayoutMismatch("agent topology differs from the experiment template")
    ckpt = _require(Path(args.checkpoint) if args.checkpoint else exp.out / "baseline" / "policy.npz", "checkpoint")
    learner, _ = Learner.load(ckpt, exp.train)
    ref = morphology_reference(template)
    m = ArticulatedModel.from_agents([agent])
    probe = observe(init_sim(m), m)
    if (probe.s_m.shape[1], probe.s_p.shape[1] + probe.s_g.shape[1], m.n_joints) != (
            learner.sm_dim, learner.obs_dim, learner.act_dim):
        raise LayoutMismatch("checkpoint was trained for a different observation or action layout")
    traj = [] if args.trajectory else None
    seed = exp.seed if args.seed is not None else exp.train.eval_seed
    returns = rollout_returns([agent], learner.act, args.episodes, seed, exp.env, ref, traj)[0]
    if traj is not None:
        write_trajectory(args.trajectory, traj, env=0)
    print(f"episodes {len(returns)}  mean {returns.mean():.6f}  std {returns.std():.6f}")
    return 0


def cmd_export_mjcf(args) -> int:
    from .mjcf import export_mjcf
    from .morphology import load_agent

    agent = load_agent(_require(Path(args.agent), "agent description"))
    text = export_mjcf(agent)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="codesign", description="Morphology and policy co-design for capsule walkers.")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads; 1 gives bitwise reproducible runs")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config (YAML)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory (overrides the config)")
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    sp = sub.add_parser("train-baseline", help="train the template agent's policy")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    sp.set_defaults(func=cmd_train_baseline)

    sp = sub.add_parser("evolve", help="run the co-design loop from a trained baseline")
    common(sp)
    sp.add_argument("--from-scratch", action="store_true", help="train the baseline first")
    sp.add_argument("--ablate-mutation", action="store_true", help="also run without mutation and plot both")
    sp.set_defaults(func=cmd_evolve)

    sp = sub.add_parser("evaluate", help="deterministic evaluation of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--agent", default=None, help="agent description (defaults to the template)")
    sp.add_argument("--episodes", type=int, default=20)
    sp.add_argument("--trajectory", default=None, help="write a CSV trajectory of the first episode")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("export-mjcf", help="convert an agent description to MJCF")
    sp.add_argument("--agent", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_export_mjcf)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .errors import CodesignError, LayoutMismatch

    try:
        return args.func(args)
    except MissingPath as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    except LayoutMismatch as exc:
        print(f"error: layout mismatch: {exc}", file=sys.stderr)
        return EXIT_LAYOUT
    except (CodesignError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
