"""RMSE and 95% coverage of plain and sharded ensembles on a synthetic function.

Variants A-C fit the plain ensemble to 25/50/100% of the data, D-F the
sharded model with shardepth 0/1/2.

    python3 scripts/run_rmse_comparison.py --function branin --replicates 10 --out rmse.csv
"""
import argparse
import json

from shardbart.bench import ExperimentSpec, mean_rmse_ratio, run_experiment, summarize, \
    write_reports_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--function", default="branin", choices=["branin", "friedman", "step"])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--d", type=int, default=None, help="defaults to 2 (branin, step) or 5")
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--ntree", type=int, default=10)
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--nmcmc", type=int, default=500)
    p.add_argument("--burn", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="rmse.csv")
    args = p.parse_args()
    d = args.d if args.d is not None else (5 if args.function == "friedman" else 2)
    spec = ExperimentSpec(function=args.function, n=args.n, n_test=args.n_test, d=d,
                          noise_sd=args.noise_sd, m=args.ntree, replicates=args.replicates,
                          nmcmc=args.nmcmc, burn=args.burn, seed=args.seed)
    reports = run_experiment(spec)
    write_reports_csv(reports, args.out)
    out = summarize(reports)
    out["ratio_E_over_B"] = mean_rmse_ratio(reports, "E", "B")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
