"""Command line entry point: ``lanempc run | compare | validate``.

Exit codes: 0 ok, 1 runtime failure, 2 config error, 3 ordering assertion failed.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import InconsistentGraph, InfeasibleBox, LaneMpcError, MalformedConfig, MismatchedScenario, UnknownLane
from .harness import RunPlan, compare, format_tables, run_scenario, summary_rows, validate

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_ASSERT = 0, 1, 2, 3
CONFIG_ERRORS = (MalformedConfig, InconsistentGraph, UnknownLane, InfeasibleBox, MismatchedScenario)


def build_parser():
    parser = argparse.ArgumentParser(prog="lanempc", description="Lane-level distributed MPC signal control.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario under one or more controllers")
    run.add_argument("config", help="scenario JSON, a previous run's manifest.json, or a bundled name")
    run.add_argument("--controller", action="append", dest="controllers", metavar="TYPE",
                     help="controller type to run (repeatable; default: all configured)")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--horizon", type=int, default=None, help="override the number of control steps")
    run.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    run.add_argument("--no-plots", action="store_true", help="skip the PNG figures")
    run.add_argument("--trace", action="store_true", help="also write per-sweep ADMM solver traces")

    cmp_ = sub.add_parser("compare", help="rank controllers across summary.csv files")
    cmp_.add_argument("files", nargs="+", type=Path)
    cmp_.add_argument("--assert-ordering", metavar="SPEC",
                      help="e.g. 'dmpc < max_pressure < fixed_time, stops: dmpc < ftc'")

    val = sub.add_parser("validate", help="check a scenario file without running it")
    val.add_argument("config")
    return parser


def _run(args):
    plan = RunPlan(args.config, controllers=args.controllers, seed=args.seed, horizon=args.horizon,
                   out_dir=args.out, plots=not args.no_plots, trace=args.trace)
    result = run_scenario(plan)
    table = {row["controller"]: row for row in summary_rows(result)}
    print(format_tables(table, ("average_delay_s", "average_stops", "total_travel_time_min", "relative_loss_time")))
    print(f"wrote {len(result.files)} files to {args.out}")
    return EXIT_OK


def _compare(args):
    ok, text = compare(args.files, args.assert_ordering)
    print(text)
    return EXIT_OK if ok else EXIT_ASSERT


def _validate(args):
    print(validate(args.config))
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"run": _run, "compare": _compare, "validate": _validate}[args.command]
    try:
        return handler(args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LaneMpcError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
