#!/usr/bin/env python
"""
wflow_cli.py

Command-line entry point.

Usage
-----
    wflow run config.json [--out runs/ring] [--verbose]
    wflow plot runs/ring/trace.csv ring.dat [--cloud runs/ring/final_cloud.csv] [--log-scale] [--png]
    wflow check [--seed 0] [--ncpu 4] [--only grad_sw ...]
    wflow compare config.json [--csv comparison.csv] [--grid 1.25 1.5 1.75] [--seeds 0 1 2]
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from wflow.diagnostics import CHECKS, run_check_suite
from wflow.pipeline.experiment_config import ConfigError, load_experiment_config
from wflow.pipeline.experiments import (
    EXIT_CONFIG,
    EXIT_FAILURE,
    EXIT_OK,
    compare_preconditioning,
    run_experiment,
    summarize_comparison,
)
from wflow.pipeline.parallel import thread_cap
from wflow.pipeline.plotdata import emit_plotdata


def parse_args(argv=None) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="wflow", description="Wasserstein mirror and preconditioned descent experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one experiment config")
    run.add_argument("config", type=Path, help="JSON experiment config")
    run.add_argument("--out", type=Path, default=None, help="Output directory (overrides output.directory)")
    run.add_argument("--verbose", action="store_true", help="Echo the run log to stdout")

    plot = sub.add_parser("plot", help="Write gnuplot-ready data from a trace")
    plot.add_argument("trace", type=Path, help="trace.csv of a run")
    plot.add_argument("out", type=Path, help="Output data file")
    plot.add_argument("--cloud", type=Path, default=None, help="final_cloud.csv for a scatter file")
    plot.add_argument("--log-scale", action="store_true", help="Mark the objective axis as log scale")
    plot.add_argument("--png", action="store_true", help="Also render a PNG next to the output")

    check = sub.add_parser("check", help="Run the numerical check suite")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--ncpu", type=int, default=None, help="Worker processes (default: WFLOW_THREADS or 1)")
    check.add_argument("--only", nargs="+", choices=sorted(CHECKS), default=None, help="Run only these checks")

    compare = sub.add_parser("compare", help="Identity vs polynomial preconditioning on an alignment config")
    compare.add_argument("config", type=Path, help="JSON experiment config (align preset)")
    compare.add_argument("--csv", type=Path, default=None, help="Write all runs to this CSV")
    compare.add_argument("--grid", type=float, nargs="+", default=[1.25, 1.5, 1.75])
    compare.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    compare.add_argument("--objectives", nargs="+", choices=["sw", "sinkhorn", "sliced_ed"],
                         default=["sw", "sinkhorn", "sliced_ed"])
    return p.parse_args(argv)


def _check(args) -> int:
    ncpu = thread_cap() if args.ncpu is None else args.ncpu
    results = run_check_suite(seed=args.seed, ncpu=ncpu, names=args.only)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:{width}}  {r.value: .3e}  (threshold {r.threshold:g})  {'PASS' if r.passed else 'FAIL'}")
        if r.error is not None:
            print(f"{'':{width}}  {r.error}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def _compare(args) -> int:
    try:
        cfg = load_experiment_config(args.config)
    except ConfigError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    frame = compare_preconditioning(cfg, grid=tuple(args.grid), seeds=tuple(args.seeds),
                                    objectives=tuple(args.objectives))
    if args.csv:
        frame.to_csv(args.csv, index=False)
    print(summarize_comparison(frame).to_string(index=False))
    return EXIT_OK


def main(argv=None) -> int:
    args = parse_args(argv)
    if args.command == "run":
        return run_experiment(args.config, output_dir=args.out, verbose=args.verbose)
    if args.command == "plot":
        return emit_plotdata(args.trace, args.out, cloud_path=args.cloud, log_scale=args.log_scale, png=args.png)
    if args.command == "check":
        return _check(args)
    return _compare(args)


if __name__ == "__main__":
    sys.exit(main())
