#!/usr/bin/env python
"""
aggregate_run_status.py

Summarise experiment status across many run directories from their JSON logs
and ``summary.json`` files.

Usage
-----
    wflow-status /path/to/runs [--csv summary.csv] [--experiment ring]
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import pandas as pd

FINAL_STEP = "experiment"
COLUMNS = ["experiment", "seed", "complete", "last_step", "last_status", "termination", "final_objective", "run_dir"]


def parse_args(argv=None) -> argparse.Namespace:
    p = argparse.ArgumentParser(description="Summarise wflow experiment runs.")
    p.add_argument(
        "root_dir",
        type=Path,
        help="Directory that contains many run folders with log files",
    )
    p.add_argument(
        "--csv",
        type=Path,
        default=None,
        help="Optional path to write the summary table as CSV",
    )
    p.add_argument(
        "--experiment",
        default=None,
        help="Only report runs of this experiment tag",
    )
    return p.parse_args(argv)


def extract_structured_rows(jsonlog: Path) -> list[dict]:
    """Return rows that contain all required structured fields."""
    rows: list[dict] = []
    with jsonlog.open() as fh:
        for line in fh:
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                continue
            if all(rec.get(k) is not None for k in ("experiment", "seed", "step", "status")):
                rows.append({k: rec[k] for k in ("experiment", "seed", "step", "status")})
    return rows


def aggregate(root: Path) -> list[dict]:
    """
    One dict per run directory:
    experiment, seed, complete, last_step, last_status, termination,
    final_objective, run_dir.
    """
    summary: list[dict] = []
    for jsonlog in sorted(Path(root).rglob("run.jsonlog")):
        rows = extract_structured_rows(jsonlog)
        if not rows:
            continue
        current = {
            "experiment": rows[0]["experiment"],
            "seed": rows[0]["seed"],
            "complete": False,
            "last_step": None,
            "last_status": None,
            "termination": None,
            "final_objective": None,
            "run_dir": str(jsonlog.parent),
        }
        # logs are chronological
        for r in rows:
            current["last_step"] = r["step"]
            current["last_status"] = r["status"]
            if r["step"] == FINAL_STEP and str(r["status"]).lower() == "success":
                current["complete"] = True
        summary_path = jsonlog.parent / "summary.json"
        if summary_path.exists():
            data = json.loads(summary_path.read_text())
            current["termination"] = data.get("termination")
            current["final_objective"] = data.get("final_objective")
        summary.append(current)
    return summary


def to_frame(rows: list[dict]) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=COLUMNS)
    return frame.sort_values(["experiment", "seed", "run_dir"], ignore_index=True)


def main(argv=None):
    args = parse_args(argv)
    rows = aggregate(args.root_dir)

    if args.experiment is not None:
        rows = [r for r in rows if r["experiment"] == args.experiment]

    if not rows:
        print("No structured log entries found.", file=sys.stderr)
        return 1

    frame = to_frame(rows)
    print(frame.drop(columns="run_dir").to_string(index=False, float_format="{:.6g}".format))
    done = int(frame["complete"].sum())
    print(f"\n{done}/{len(frame)} runs complete")
    if args.csv:
        frame.to_csv(args.csv, index=False)
        print(f"\nCSV summary written to {args.csv}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
