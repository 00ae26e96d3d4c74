"""Median seconds per iteration of the sharded sampler against shardepth.

    python3 scripts/run_timing.py --n 5000 --ntree 10 --runs 5 --tc 4
"""
import argparse
import json
import os

import numpy as np

from shardbart.bench import timing_study


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--ntree", type=int, default=10)
    p.add_argument("--shardepths", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--tc", type=int, default=4)
    p.add_argument("--nmcmc", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    timing = timing_study(n=args.n, m=args.ntree, shardepths=args.shardepths, runs=args.runs,
                          tc=args.tc, nmcmc=args.nmcmc, seed=args.seed)
    out = {"cpus": os.cpu_count(),
           "median_seconds_per_iter": {k: float(np.median(v)) for k, v in timing.items()},
           "runs": {k: v for k, v in timing.items()}}
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
