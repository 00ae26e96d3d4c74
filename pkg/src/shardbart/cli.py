"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 data, 4 numerical.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import design
from .bart import BartConfig
from .bench import ExperimentSpec, run_experiment, summarize, write_reports_csv
from .errors import InputError, NumericalError, ShardBartError
from .io import (dump_model, load_dataset, load_model, manifest, read_numeric_csv, rescale,
                 write_csv, write_diagnostics)
from .sharding import SbtConfig, sbt_fit, sbt_predict

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "t", "1", "yes"):
        return True
    if t in ("false", "f", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected TRUE or FALSE, got {text!r}")


def _add_fit_args(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="CSV with header; response in the last column")
    p.add_argument("--y-col", default=None, help="response column name")
    p.add_argument("--ntree", type=int, default=10, help="trees per shard ensemble")
    p.add_argument("--ntreeh", type=int, default=1, help="variance trees (only 1 supported)")
    p.add_argument("--numcut", type=int, default=100)
    p.add_argument("--shardepth", type=int, default=1)
    p.add_argument("--randshard", type=parse_bool, default=False,
                   help="with --aux deterministic: dataset-order (TRUE) or random-order blocks")
    p.add_argument("--aux", choices=("uniform", "deterministic"), default="uniform")
    p.add_argument("--pbd", type=float, nargs=2, default=(0.5, 0.5), metavar=("BIRTH", "DEATH"))
    p.add_argument("--probchv", type=float, default=0.1)
    p.add_argument("--probchvh", type=float, default=None, help="accepted and ignored")
    p.add_argument("--shardpsplit", type=float, default=1.0)
    p.add_argument("--nmin", type=int, default=10, help="minimum observations per shard")
    p.add_argument("--minleaf", type=int, default=5)
    p.add_argument("--sigma", type=float, default=None, help="fix the noise sd")
    p.add_argument("--tc", type=int, default=1, help="worker threads")
    p.add_argument("--nmcmc", type=int, default=1000)
    p.add_argument("--burn", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", choices=("bart",), default="bart")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shardbart", allow_abbrev=False,
                                     description="Sharded Bayesian additive regression trees")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_fit_args(sub.add_parser("fit", help="fit a model and write it to --out",
                                 allow_abbrev=False))

    p = sub.add_parser("predict", help="posterior predictive summaries", allow_abbrev=False)
    p.add_argument("--model", required=True, help="model directory or model.txt")
    p.add_argument("--grid", required=True, help="CSV of input points with a header")
    p.add_argument("--n-draws", type=int, default=1)
    p.add_argument("--aggregate", choices=("route", "volume", "optimal"), default="route")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output CSV (default stdout)")

    p = sub.add_parser("design", help="optimal allocations", allow_abbrev=False)
    p.add_argument("--criterion", choices=("d", "a", "minmax", "constrained"), default="d")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--B", type=int, default=None)
    p.add_argument("--lower", type=int, nargs="+", default=None)
    p.add_argument("--upper", type=int, nargs="+", default=None)

    p = sub.add_parser("simulate", help="random assignment optimality simulation",
                       allow_abbrev=False)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--B", type=int, default=4)
    p.add_argument("--batches", type=int, default=2000)
    p.add_argument("--draws-per-batch", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV of (batch_index, phi)")

    p = sub.add_parser("bench", help="synthetic model comparison", allow_abbrev=False)
    p.add_argument("--function", choices=("branin", "friedman", "step", "constant"),
                   default="branin")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--ntree", type=int, default=10)
    p.add_argument("--shardepths", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--variants", nargs="+", default=list("ABCDEF"))
    p.add_argument("--nmcmc", type=int, default=500)
    p.add_argument("--burn", type=int, default=100)
    p.add_argument("--tc", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="long-format CSV")
    return parser


def _fail(parser, message):
    parser.error(message)


def cmd_fit(args, parser) -> int:
    if args.ntreeh != 1:
        _fail(parser, "--ntreeh: only 1 (homoscedastic noise) is supported")
    if args.tc < 1:
        _fail(parser, "--tc must be >= 1")
    if not 0 <= args.burn < args.nmcmc:
        _fail(parser, "need 0 <= --burn < --nmcmc")
    if args.probchvh is not None:
        warnings.warn("--probchvh has no effect: a single change-variable probability is used")
    data = load_dataset(args.data, args.y_col)
    bart = BartConfig(m=args.ntree, numcut=args.numcut, pbd=tuple(args.pbd),
                      probchv=args.probchv, min_leaf=args.minleaf, sigma_fixed=args.sigma)
    cfg = SbtConfig(bart=bart, shardepth=args.shardepth, randshard=args.randshard,
                    aux=args.aux, n_min=args.nmin, shardpsplit=args.shardpsplit, tc=args.tc)
    fit = sbt_fit(data.X, data.y, cfg, args.nmcmc, args.burn, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"columns": list(data.columns), "response": data.y_column,
            "x_min": [float(v) for v in data.x_min], "x_max": [float(v) for v in data.x_max],
            "y_offset": fit.calibration.offset, "u_numcut": cfg.u_numcut}
    (out / "model.txt").write_text(dump_model(fit.samples, meta))
    run_config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    run_config["bart"] = asdict(bart)
    (out / "manifest.json").write_text(
        json.dumps(manifest(fit, run_config, args.seed, args.nmcmc, args.burn, data),
                   indent=2, sort_keys=True) + "\n")
    write_diagnostics(out / "diagnostics.csv", fit.diagnostics)
    print(f"wrote {len(fit.samples)} samples to {out}")
    return EXIT_OK


def cmd_predict(args, parser) -> int:
    path = Path(args.model)
    if path.is_dir():
        path = path / "model.txt"
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read model {path}: {exc}") from exc
    samples, meta = load_model(text)
    header, grid = read_numeric_csv(args.grid)
    columns = meta["columns"]
    if header != columns:
        if len(header) == len(columns) + 1 and header[:-1] == columns:
            grid = grid[:, :-1]
        elif len(header) != len(columns):
            raise InputError(f"grid has {len(header)} columns, model expects {len(columns)}")
    X = rescale(grid, meta["x_min"], meta["x_max"])
    pred = sbt_predict(samples, X, seed=args.seed, n_draws=args.n_draws,
                       aggregate=args.aggregate)
    rows = np.column_stack([pred.mean, pred.lo, pred.hi])
    if args.out:
        write_csv(args.out, ["mean", "lo95", "hi95"], rows)
    else:
        print("mean,lo95,hi95")
        for r in rows:
            print(",".join(repr(float(v)) for v in r))
    return EXIT_OK


def cmd_design(args, parser) -> int:
    if args.criterion == "constrained":
        if args.lower is None or args.upper is None:
            _fail(parser, "--criterion constrained needs --lower and --upper")
        box = design.BoxConstraint(tuple(args.lower), tuple(args.upper))
        alloc = design.constrained_allocation(args.n, box)
        value = design.phi_fixed(alloc)
    else:
        if args.B is None:
            _fail(parser, f"--criterion {args.criterion} needs --B")
        alloc, value = design.optimal_allocation(args.n, args.B)
        if args.criterion == "a":
            value = design.a_criterion(alloc)
        elif args.criterion == "minmax":
            value = design.minmax_criterion(alloc)
    print(json.dumps({"criterion": args.criterion, "n": args.n, "B": alloc.B,
                      "allocation": list(alloc.counts), "value": float(value),
                      "value_exact": str(value)}))
    return EXIT_OK


def cmd_simulate(args, parser) -> int:
    if args.B < 1 or args.B > args.n:
        _fail(parser, "need 1 <= --B <= --n")
    rate = design.random_assignment_optimality_rate(args.n, args.B, args.batches, args.seed,
                                                    args.draws_per_batch)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("batch_index,phi\n")
            for batch, counts in design.simulate_phi(args.n, args.B, args.batches, args.seed,
                                                     args.draws_per_batch):
                phi = np.exp(np.sum(np.log(counts / args.n), axis=1))
                np.savetxt(fh, np.column_stack([batch, phi]), fmt=["%d", "%.17g"], delimiter=",")
    _, phi_max = design.optimal_allocation(args.n, args.B)
    print(json.dumps({"n": args.n, "B": args.B, "draws": args.batches * args.draws_per_batch,
                      "rate": rate, "phi_max": float(phi_max),
                      "exact_rate": design.exact_optimality_probability(args.n, args.B)}))
    return EXIT_OK


def cmd_bench(args, parser) -> int:
    spec = ExperimentSpec(function=args.function, n=args.n, n_test=args.n_test, d=args.d,
                          noise_sd=args.noise_sd, m=args.ntree, shardepths=tuple(args.shardepths),
                          replicates=args.replicates, seed=args.seed, nmcmc=args.nmcmc,
                          burn=args.burn, tc=args.tc, variants=tuple(args.variants))
    reports = run_experiment(spec)
    write_reports_csv(reports, args.out)
    print(json.dumps(summarize(reports), indent=2))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "design": cmd_design,
            "simulate": cmd_simulate, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args, parser)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, ShardBartError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
