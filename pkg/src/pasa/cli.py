"""Command-line entry point: ``pasa <subcommand> [flags]``.

Exit codes: 0 success, 2 config error, 3 capacity error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .envs import GarnetSpec, GridworldSpec, LogisticsSpec
from .errors import CapacityError, ConfigError, InvalidArgument
from .evaluation import cycle_statistics, exact_c1_moments, exact_mean_cyclic_states
from .harness import (ExperimentConfig, dump_config, emit_results, load_config,
                      measure_iteration_cost, run_experiment, run_mse_experiment)

EXIT_OK, EXIT_CONFIG, EXIT_CAPACITY, EXIT_IO = 0, 2, 3, 4
FAMILY = {"garnet-perf": GarnetSpec, "garnet-mse": GarnetSpec, "timing": GarnetSpec,
          "gridworld": GridworldSpec, "logistics": LogisticsSpec}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pasa", description="Adaptive state aggregation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("garnet-perf", "final-window reward of fixed vs adaptive aggregation on GARNETs"),
                       ("garnet-mse", "Q-estimate error under a fixed epsilon-deterministic policy"),
                       ("gridworld", "reward curves on the teleporting gridworld"),
                       ("logistics", "reward curves on the logistics problem"),
                       ("cycle-stats", "cycle statistics of random functional graphs"),
                       ("timing", "per-iteration cost of fixed vs adaptive aggregation")]:
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="master seed (nonnegative)")
        p.add_argument("--trials", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        p.add_argument("--agent", choices=("tabular", "fixed", "pasa"),
                       help="run a single agent kind instead of the fixed/adaptive pair")
        p.add_argument("--states", type=int, help="number of states (GARNET and cycle-stats)")
        if name == "cycle-stats":
            p.add_argument("--samples", type=int, default=10_000)
        if name == "timing":
            p.add_argument("--repeats", type=int, default=3)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    spec_cls = FAMILY.get(args.command)
    if spec_cls is not None and not isinstance(cfg.environment, spec_cls):
        cfg = replace(cfg, environment=spec_cls() if spec_cls is not GarnetSpec else GarnetSpec(S=250))
    if args.states is not None:
        if not isinstance(cfg.environment, GarnetSpec):
            raise ConfigError("--states", "only applies to GARNET environments")
        try:
            cfg = replace(cfg, environment=replace(cfg.environment, S=args.states))
        except InvalidArgument as exc:
            raise ConfigError("--states", str(exc)) from exc
    updates = {k: getattr(args, k) for k in ("seed", "trials", "iterations")
               if getattr(args, k) is not None}
    if args.agent:
        updates["agent"] = args.agent
    cfg = replace(cfg, **updates)
    if args.command == "garnet-mse":
        cfg = replace(cfg, fixed_policy=True)
    return cfg.validate()


def _kinds(args) -> tuple[str, ...]:
    return (args.agent,) if args.agent else ("fixed", "pasa")


def _summary(report) -> str:
    parts = [f"{report.agent:>7}: final reward {report.mean('final_reward'):.6g}"
             f" ± {report.ci('final_reward'):.3g}"]
    if report.config.fixed_policy:
        parts.append(f"rmse {report.mean('rmse'):.6g} ± {report.ci('rmse'):.3g}"
                     f" (normalised {report.mean('nrmse'):.4g})")
    return ", ".join(parts)


def cmd_experiment(args) -> int:
    base = resolve_config(args)
    runner = run_mse_experiment if args.command == "garnet-mse" else run_experiment
    for kind in _kinds(args):
        report = runner(replace(base, agent=kind).validate())
        emit_results(report, args.out, prefix=kind)
        print(_summary(report))
    return EXIT_OK


def cmd_cycles(args) -> int:
    S = 10_000 if args.states is None else args.states
    seed = 0 if args.seed is None else args.seed
    if S < 2:
        raise ConfigError("--states", "must be >= 2")
    if args.samples < 1:
        raise ConfigError("--samples", "must be >= 1")
    if seed < 0:
        raise ConfigError("--seed", "must be nonnegative")
    if args.config:
        load_config(args.config)   # validated for consistency, nothing in it applies here
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    st = cycle_statistics(S, args.samples, rng)
    mean_exact, var_exact = exact_c1_moments(S)
    rows = [("S", S), ("samples", args.samples), ("seed", seed),
            ("mean_c1", repr(st.mean_c1)), ("var_c1", repr(st.var_c1)),
            ("mean_cyclic", repr(st.mean_c)),
            ("exact_mean_cyclic", repr(exact_mean_cyclic_states(S))), ("mean_l1", repr(st.mean_l1)),
            ("exact_mean_c1", repr(mean_exact)), ("exact_var_c1", repr(var_exact)),
            ("asymptotic_mean_c1", repr(float(np.sqrt(np.pi * S / 8)))),
            ("asymptotic_var_c1_over_s", repr((32 - 8 * np.pi) / 24))]
    _write_rows(Path(args.out) / "cycles.csv", ("statistic", "value"), rows)
    print(f"S={S}: mean C1 {st.mean_c1:.4f} (exact {mean_exact:.4f}), "
          f"Var C1/S {st.var_c1 / S:.4f} (exact {var_exact / S:.4f})")
    return EXIT_OK


def cmd_timing(args) -> int:
    cfg = resolve_config(args)
    kinds = ("tabular", "fixed", "pasa") if cfg.S <= 1 << 16 else ("fixed", "pasa")
    cost = measure_iteration_cost(cfg, repeats=args.repeats, kinds=kinds)
    out = Path(args.out)
    _write_rows(out / "timing.csv", ("measure", "value"),
                [(k, "" if v is None else repr(float(v))) for k, v in cost.items()])
    try:
        (out / "timing_config.yaml").write_text(dump_config(cfg))
    except OSError as exc:
        raise OSError(f"cannot write {out / 'timing_config.yaml'}: {exc.strerror}") from exc
    for k, v in cost.items():
        print(f"{k:>8}: {'n/a' if v is None else f'{v:.4g}'}")
    return EXIT_OK


def _write_rows(path: Path, header, rows):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"cycle-stats": cmd_cycles, "timing": cmd_timing}.get(args.command, cmd_experiment)
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgument as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
