"""Command line interface.

::

    fbsde-lab run <file.json> [--paths N] [--steps N] [--horizon T] [--seed S] [--out DIR] [--format csv|json]
    fbsde-lab builtin <name> [same options]
    fbsde-lab list

Every scenario writes ``<scenario>.summary.json`` (sorted keys, no timing, so
identical inputs give byte-identical files), ``<scenario>.timing.json`` (when it ran) and
one file per artifact, named ``<scenario>.<artifact>.<ext>``.  The exit code
is 0 when every requested check passed, 1 when some check failed and 2 on
invalid input or a solver error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .catalog import builtin_data, builtin_names, describe
from .pipelines import RunReport, ScenarioRunError, Table, plain, run_scenario
from .scenario import ScenarioError, apply_overrides, load_scenarios, parse_problem

__all__ = ["emit_results", "main", "build_parser"]


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n")


def _write_table(table: Table, path: Path, fmt: str) -> None:
    rows = np.asarray(table.rows, dtype=float)
    if fmt == "json":
        _dump_json({"columns": list(table.columns), "rows": rows}, path)
        return
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.columns)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def emit_results(report: RunReport, fmt: str, out_dir) -> list[Path]:
    """Write the summary, timing and artifacts of ``report``; return the written paths."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = out / f"{report.name}.summary.json"
    _dump_json(report.summary(), summary)
    written.append(summary)
    if report.wall_time > 0:
        timing = out / f"{report.name}.timing.json"
        _dump_json({"name": report.name, "wall_time_seconds": report.wall_time}, timing)
        written.append(timing)
    for name in sorted(report.artifacts):
        art = report.artifacts[name]
        if isinstance(art, Table):
            path = out / f"{report.name}.{name}.{fmt}"
            _write_table(art, path, fmt)
        else:
            path = out / f"{report.name}.{name}.json"
            _dump_json(art, path)
        written.append(path)
    return written


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbsde-lab", description="Simulate and check FBSDE scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_options(p):
        p.add_argument("--paths", type=int, help="number of Monte Carlo paths")
        p.add_argument("--steps", type=int, help="number of time steps")
        p.add_argument("--horizon", type=float, help="final time of the grid")
        p.add_argument("--seed", type=int, help="root random seed")
        p.add_argument("--out", default="results", help="output directory (default: results)")
        p.add_argument("--format", choices=("csv", "json"), help="format of path tables (default: scenario's, csv)")

    run = sub.add_parser("run", help="run the scenarios in a JSON file")
    run.add_argument("file", help="scenario file")
    add_options(run)
    bi = sub.add_parser("builtin", help="run a builtin scenario")
    bi.add_argument("name", help="builtin name (see 'list')")
    add_options(bi)
    sub.add_parser("list", help="list builtin scenarios")
    return parser


def _run(scenarios, args) -> int:
    status = 0
    for s in scenarios:
        s = apply_overrides(s, paths=args.paths, steps=args.steps, horizon=args.horizon, seed=args.seed)
        report = run_scenario(s)
        files = emit_results(report, args.format or s.output["format"], args.out)
        verdicts = ", ".join(f"{k}={'pass' if v.get('passed') else 'FAIL'}" for k, v in report.checks.items())
        print(f"{report.name}: {verdicts or 'no checks'} ({report.wall_time:.1f}s)")
        for f in files:
            print(f"  {f}")
        if not report.passed:
            status = 1
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        width = max(map(len, builtin_names()))
        for name in builtin_names():
            print(f"{name:<{width}}  {describe(name)}")
        return 0
    try:
        if args.command == "run":
            scenarios = parse_problem(args.file)
        else:
            try:
                scenarios = load_scenarios(builtin_data(args.name))
            except KeyError as exc:
                raise ScenarioError(exc.args[0]) from None
        return _run(scenarios, args)
    except (ScenarioError, ScenarioRunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
