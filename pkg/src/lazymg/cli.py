"""Command line entry point ``lazymg``.

``lazymg run --config FILE [--override k=v ...] [flags]``
    run one experiment and write its telemetry CSV; the exit status is 0 for
    convergence, 2 for a timeout and 3 for divergence.
``lazymg table [--thetas 1,16,64] [--cycles 10] [--depth 3] [--inputs CSV ...]``
    print the per-cycle max n / avg n / compression report.
``lazymg compare A.csv B.csv``
    cycles, DoF updates and time to target of two runs, as JSON.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from .experiments import (ConfigError, ExperimentConfig, compare_runs, emit_table, read_csv,
                          run_experiment, run_sweep, run_table)

# flag -> (config key, argparse keywords)
RUN_FLAGS = {
    "--setup": ("setup", dict(choices=("theta", "quadrant", "constant"))),
    "--theta": ("theta", dict()),
    "--eps-low": ("eps_low", dict()),
    "--rhs": ("rhs", dict(choices=("zero", "one", "material"))),
    "--depth": ("depth", dict()),
    "--seed": ("seed", dict()),
    "--assembly": ("assembly", dict(choices=("eager", "lazy", "adaptive", "anarchic"))),
    "--termination-c": ("termination_c", dict()),
    "--transfer": ("transfer", dict(choices=("geometric", "boxmg"))),
    "--coarse-recompute": ("coarse_recompute", dict(choices=("always", "ripple"))),
    "--gating": ("gating", dict(choices=("on", "off"))),
    "--compression-threshold": ("compression_threshold", dict()),
    "--solver": ("solver", dict(choices=("additive", "adafac-jac", "adafac-pi"))),
    "--omega": ("omega", dict()),
    "--target": ("target", dict()),
    "--max-cycles": ("max_cycles", dict()),
    "--workers": ("workers", dict()),
    "--throttle": ("throttle", dict()),
    "--forced-task-fraction": ("forced_task_fraction", dict()),
    "--amr": ("amr", dict(choices=("on", "off"))),
    "--output": ("output", dict()),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lazymg", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", help="key = value configuration file")
    run.add_argument("--override", action="append", default=[], metavar="K=V",
                     help="override one configuration key (repeatable)")
    for flag, (key, kw) in RUN_FLAGS.items():
        run.add_argument(flag, dest=key, default=None, **kw)

    table = sub.add_parser("table", help="max n / avg n / compression report")
    table.add_argument("--thetas", default="1,16,64")
    table.add_argument("--cycles", type=int, default=10)
    table.add_argument("--depth", type=int, default=3)
    table.add_argument("--inputs", nargs="+", metavar="CSV",
                       help="telemetry files to tabulate instead of running")

    compare = sub.add_parser("compare", help="compare two telemetry files")
    compare.add_argument("a")
    compare.add_argument("b")
    compare.add_argument("--target", type=float, default=1e-10)
    return parser


def load_config(args) -> ExperimentConfig:
    overrides = list(args.override)
    for key, _ in RUN_FLAGS.values():
        value = getattr(args, key)
        if value is not None:
            overrides.append(f"{key} = {value}")
    if args.config:
        return ExperimentConfig.from_file(args.config, overrides)
    return ExperimentConfig.from_text("", overrides)


def _cmd_run(args) -> int:
    config = load_config(args)
    if config.experiment == "sweep":
        result = run_sweep(config)
        print(f"{len(result.rows)} sweeps, {result.forced} forced cells -> {config.output}")
        return 0
    result = run_experiment(config)
    last = result.reports[-1]
    print(f"{result.status.value}: {len(result.reports)} cycles, normalized residual "
          f"{last.normalized:.3e}, pending {last.pending} -> {config.output}")
    return result.exit_code


def _cmd_table(args) -> int:
    if args.inputs:
        runs = {}
        for path in args.inputs:
            rows = read_csv(path)
            runs[_label(rows[0]["problem"])] = rows
    else:
        thetas = [float(t) for t in args.thetas.split(",") if t.strip()]
        runs = run_table(thetas, depth=args.depth, cycles=args.cycles)
    print(emit_table(runs))
    return 0


def _label(problem: str):
    if problem.startswith("theta(") and problem.endswith(")"):
        return float(problem[6:-1])
    return problem


def _cmd_compare(args) -> int:
    print(json.dumps(compare_runs(args.a, args.b, args.target), indent=2))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return {"run": _cmd_run, "table": _cmd_table, "compare": _cmd_compare}[args.command](args)
    except (ConfigError, OSError) as exc:
        print(f"lazymg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
