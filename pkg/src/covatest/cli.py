"""Command-line front end: ``covatest analyze`` runs the configured tests on
a CSV dataset; ``covatest simulate`` runs a Monte Carlo study of a named
design. Outputs embed the package version, the seed, and the fully resolved
statistical configuration, so any result file can be reproduced bit-exactly;
the worker count is an execution detail and is deliberately not part of the
recorded configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .analysis import ADJUSTMENTS, METHODS, WORKINGS, AnalysisSpec, run_analysis
from .data import ColumnSchema, load_trial_csv
from .simulate import NAMED_DESIGNS, default_cells, monte_carlo_study, named_design

_ENV_WORKERS = "COVATEST_WORKERS"


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(_ENV_WORKERS, "1")))
    except ValueError:
        return 1


def _parse_adjust(value: str) -> tuple[str, tuple[int, ...]]:
    if value.startswith("fixed:"):
        cols = value[len("fixed:"):]
        idx = tuple(int(v) for v in cols.split(",") if v != "")
        if not idx:
            raise argparse.ArgumentTypeError("fixed adjustment needs column indices")
        return "fixed", idx
    if value not in ADJUSTMENTS or value == "fixed":
        raise argparse.ArgumentTypeError(
            f"unknown adjustment {value!r}; use one of "
            f"{', '.join(a for a in ADJUSTMENTS if a != 'fixed')} or fixed:<cols>")
    return value, ()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covatest",
        description="Covariate-adjusted treatment-effect tests for randomized trials.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="run tests on a trial CSV")
    pa.add_argument("--input", required=True, help="CSV with cluster, treatment, outcome columns")
    pa.add_argument("--method", action="append", choices=METHODS,
                    help="repeatable; default: all methods")
    pa.add_argument("--adjust", action="append", metavar="ADJ",
                    help="repeatable: none|aic|bicn|bicm|alasso|fixed:<cols>; default none")
    pa.add_argument("--working", action="append", choices=WORKINGS,
                    help="repeatable working covariance; default indep")
    pa.add_argument("--cluster-average", action="store_true",
                    help="collapse clusters to means and use the scalar pipeline")
    pa.add_argument("--center", action="store_true",
                    help="grand-mean center outcomes before randomization tests")
    pa.add_argument("--permutations", type=int, default=1000, metavar="B")
    pa.add_argument("--exhaustive", action="store_true",
                    help="enumerate every assignment for the exact test")
    pa.add_argument("--cv-folds", type=int, default=5)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--alpha", type=float, default=0.05)
    pa.add_argument("--out", required=True, help="output path; writes JSON plus a .txt rendering")
    pa.add_argument("--workers", type=int, default=None)
    pa.add_argument("--cluster-col", default="cluster")
    pa.add_argument("--treatment-col", default="treatment")
    pa.add_argument("--outcome-col", default="outcome")

    ps = sub.add_parser("simulate", help="Monte Carlo study of a named design")
    ps.add_argument("--design", required=True,
                    help="named design, e.g. indep-null (see --list-designs)")
    ps.add_argument("--n-per-arm", type=int, default=None)
    ps.add_argument("--cluster-size", type=int, default=None)
    ps.add_argument("--reps", type=int, required=True)
    ps.add_argument("--method", action="append", choices=METHODS)
    ps.add_argument("--adjust", action="append", metavar="ADJ",
                    help="none|aic|bicn|bicm|alasso|fixed-correct|fixed-incorrect")
    ps.add_argument("--working", action="append", choices=WORKINGS)
    ps.add_argument("--permutations", type=int, default=1000, metavar="B")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--alpha", type=float, default=0.05)
    ps.add_argument("--out", required=True, help="output path; writes CSV plus a .txt summary")
    ps.add_argument("--workers", type=int, default=None)

    pl = sub.add_parser("list-designs", help="list named simulation designs")
    del pl
    return parser


def _analyze(args) -> int:
    schema = ColumnSchema(cluster=args.cluster_col, treatment=args.treatment_col,
                          outcome=args.outcome_col)
    data = load_trial_csv(args.input, schema)
    methods = args.method or list(METHODS)
    adjusts = [_parse_adjust(v) for v in (args.adjust or ["none"])]
    workings = args.working or ["indep"]

    specs = []
    for w in workings:
        for method in methods:
            for adj, fixed in adjusts:
                if method == "augmented" and adj == "none":
                    continue
                specs.append(AnalysisSpec(
                    method=method, adjustment=adj, working=w,
                    fixed_indices=fixed, center=args.center,
                    permutations=args.permutations, exhaustive=args.exhaustive,
                    cv_folds=args.cv_folds))

    results = run_analysis(data, specs, seed=args.seed,
                           average_clusters=args.cluster_average)
    config = {
        "command": "analyze",
        "input": os.path.basename(args.input),
        "methods": methods,
        "adjustments": [a if not f else "fixed:" + ",".join(map(str, f))
                        for a, f in adjusts],
        "working": workings,
        "cluster_average": bool(args.cluster_average),
        "center": bool(args.center),
        "permutations": int(args.permutations),
        "exhaustive": bool(args.exhaustive),
        "cv_folds": int(args.cv_folds),
        "alpha": float(args.alpha),
    }
    payload = {
        "version": __version__,
        "seed": int(args.seed),
        "config": config,
        "results": [
            {
                "method": r.spec.method,
                "adjustment": r.test.adjustment,
                "working": r.spec.working,
                "statistic": r.test.statistic,
                "std_error": r.test.std_error,
                "z_value": r.test.z_value,
                "p_value": r.test.p_value,
                "model_size": r.model_size,
            }
            for r in results
        ],
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(args.out + ".txt", "w") as fh:
        fh.write(_render_table(payload))
    return 0


def _fmt(value, width: int, digits: int = 4) -> str:
    if value is None:
        return f"{'--':>{width}}"
    return f"{value:>{width}.{digits}f}"


def _render_table(payload: dict) -> str:
    head = (f"{'method':<18} {'adjustment':<14} {'working':<8} "
            f"{'statistic':>12} {'std.err':>10} {'Z':>8} {'p':>10}")
    lines = [f"covatest {payload['version']}  seed={payload['seed']}", head,
             "-" * len(head)]
    for r in payload["results"]:
        lines.append(
            f"{r['method']:<18} {r['adjustment']:<14} {r['working']:<8} "
            f"{_fmt(r['statistic'], 12)} {_fmt(r['std_error'], 10)} "
            f"{_fmt(r['z_value'], 8, 3)} {_fmt(r['p_value'], 10)}")
    return "\n".join(lines) + "\n"


def _simulate(args) -> int:
    try:
        design = named_design(args.design, args.n_per_arm, args.cluster_size)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return 2
    workers = args.workers if args.workers is not None else _default_workers()
    cells = default_cells(design, methods=args.method, adjustments=args.adjust,
                          working=tuple(args.working or ("indep",)),
                          permutations=args.permutations)
    report = monte_carlo_study(design, cells, reps=args.reps, alpha=args.alpha,
                               seed=args.seed, workers=workers)
    header = (f"# covatest {__version__} simulate design={args.design} "
              f"n_per_arm={design.n_per_arm} cluster_size={design.cluster_size} "
              f"reps={args.reps} alpha={args.alpha!r} seed={args.seed} "
              f"permutations={args.permutations}\n")
    with open(args.out, "w") as fh:
        fh.write(header)
        fh.write(report.to_csv_text())
    with open(args.out + ".txt", "w") as fh:
        fh.write(header)
        fh.write(report.to_text_table())
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-designs":
        for name in sorted(NAMED_DESIGNS):
            print(name)
        return 0
    if args.command == "analyze":
        return _analyze(args)
    if args.command == "simulate":
        if args.reps < 1:
            print("reps must be >= 1", file=sys.stderr)
            return 2
        return _simulate(args)
    return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
