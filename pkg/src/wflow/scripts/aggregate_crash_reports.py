#!/usr/bin/env python
"""
aggregate_crash_reports.py

Summarise the crash reports that failed experiment runs leave in their output
directories, grouped by experiment and exception type.

Usage
-----
    wflow-crashes /path/to/runs [--csv crashes.csv] [--top N]
"""
from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import pandas as pd

CRASH_REPORT = "crash_report.txt"
COLUMNS = ["experiment", "run_dir", "exc_type", "exc_msg", "last_frame", "report_path"]

_HEADER = re.compile(r"run of (?P<experiment>.+?)\.$")
_EXCEPTION = re.compile(r"^(?P<type>[\w.]+)(?::\s*(?P<msg>.*))?$")


def parse_args(argv=None) -> argparse.Namespace:
    p = argparse.ArgumentParser(description="Summarise experiment crash reports.")
    p.add_argument("root_dir", type=Path,
                   help="Directory tree containing crash_report.txt files")
    p.add_argument("--csv", type=Path, default=None,
                   help="Optional path to write the per-report table")
    p.add_argument("--top", type=int, default=10,
                   help="Show the N most frequent exception types (default 10)")
    return p.parse_args(argv)


def extract_info(report: Path) -> dict:
    """
    Parse one crash report.

    The first line names the experiment; the last non-empty line is the
    exception (``module.Type: message``) and the nearest ``File ...`` line above
    it is the deepest frame. Anything missing is reported as ``"unknown"``.
    """
    lines = [ln.strip() for ln in Path(report).read_text().splitlines() if ln.strip()]
    info = dict.fromkeys(COLUMNS, "unknown")
    info.update(run_dir=Path(report).parent.name, report_path=str(report))

    if lines and (header := _HEADER.search(lines[0])):
        info["experiment"] = header.group("experiment")
    if len(lines) < 2:
        return info

    if exc := _EXCEPTION.match(lines[-1]):
        info["exc_type"] = exc.group("type")
        info["exc_msg"] = exc.group("msg") or ""
    else:
        info["exc_type"] = lines[-1]
    frames = [ln for ln in lines[1:-1] if ln.startswith("File")]
    if frames:
        info["last_frame"] = frames[-1]
    return info


def collect(root: Path) -> list[dict]:
    return [extract_info(report) for report in sorted(Path(root).rglob(CRASH_REPORT))]


def main(argv=None) -> int:
    args = parse_args(argv)
    rows = collect(args.root_dir)
    if not rows:
        print("No crash reports found.")
        return 0

    frame = pd.DataFrame(rows, columns=COLUMNS).sort_values(["experiment", "run_dir"])
    print(frame[["run_dir", "experiment", "exc_type", "exc_msg"]].to_string(index=False))

    by_experiment = frame.groupby("experiment").size()
    print("\nCrashes per experiment:")
    for experiment, n in by_experiment.items():
        print(f"{experiment}: {n}")

    print("\nMost frequent exceptions:")
    for exc_type, n in frame["exc_type"].value_counts().head(args.top).items():
        print(f"{exc_type}: {n}")

    if args.csv:
        frame.to_csv(args.csv, index=False)
        print(f"\nCSV summary written to {args.csv}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
