"""Command line entry point.

    popdebias run --config exp.cfg [--set key=value ...]
    popdebias sweep --config exp.cfg --lambdas 0,0.1,...,1
    popdebias compare runs/a/report.csv runs/b/report.csv
    popdebias rerank --run runs/a --method binary_xquad --strength 0.2
    popdebias synth --users 2000 --items 1000 --skew 1.2 --out data.csv

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import FORMATS, generate_synthetic, write_interactions
from .errors import ConfigError, PopDebiasError
from .experiment import (
    ExperimentConfig,
    compare_runs,
    read_reports_csv,
    rerank_run_dir,
    run_experiment,
    sweep_lambda,
)
from .rerank import RERANKERS


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config, args.set)
    if args.output:
        cfg.output = args.output
    res = run_experiment(cfg)
    print(f"wrote {res.output}")
    for name, rep in res.reports.items():
        k = max(rep.cutoffs)
        print(
            f"{name}: ndcg@{k}={rep.get('ndcg', k):.4f} isp@{k}={rep.get('isp', k):.4f} "
            f"ieo@{k}={rep.get('ieo', k):.4f}"
        )
    return 0


def _cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_file(args.config, args.set)
    try:
        lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --lambdas {args.lambdas!r}") from None
    reports = sweep_lambda(cfg, lambdas)
    print(f"{len(reports)} sweep points written to {Path(cfg.output) / 'sweep.csv'}")
    return 0


def _cmd_compare(args) -> int:
    reports = {}
    for path in args.reports:
        for name, rep in read_reports_csv(path).items():
            label = name if name not in reports else f"{name}[{Path(path).parent.name}]"
            reports[label] = rep
    table = compare_runs(reports)
    sys.stdout.write(table.to_text())
    if args.csv:
        table.to_csv(args.csv)
    return 0


def _cmd_rerank(args) -> int:
    out = rerank_run_dir(args.run, args.method, args.strength, args.k)
    print(f"wrote {out}")
    return 0


def _cmd_synth(args) -> int:
    ds = generate_synthetic(
        args.users,
        args.items,
        args.interactions_per_user,
        args.skew,
        seed=args.seed,
        n_tastes=args.tastes,
        taste_boost=args.taste_boost,
    )
    write_interactions(ds, args.out, args.format)
    print(f"wrote {len(ds)} interactions ({ds.n_users} users, {ds.n_items} items) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popdebias", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--output")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run the configured treatment over several lambdas")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--lambdas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("compare", help="side-by-side table of report.csv files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("rerank", help="re-rank a finished run's candidates")
    p.add_argument("--run", required=True, help="run output directory")
    p.add_argument("--method", required=True, choices=RERANKERS)
    p.add_argument("--strength", required=True, type=float)
    p.add_argument("--k", type=int)
    p.set_defaults(func=_cmd_rerank)

    p = sub.add_parser("synth", help="write a synthetic Zipf-skewed dataset")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--skew", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--interactions-per-user", type=int, default=50)
    p.add_argument("--tastes", type=int, default=0)
    p.add_argument("--taste-boost", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=FORMATS, default="csv")
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; 2 is reserved for data errors here
        return 1 if exc.code else 0
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PopDebiasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
