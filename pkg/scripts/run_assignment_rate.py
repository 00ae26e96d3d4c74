"""Chance that a random equal-mass assignment of n points hits the optimal design.

Prints the simulated rate next to the exact multinomial probability for each
number of shards B.

    python3 scripts/run_assignment_rate.py --n 1000 --B 2 4 8 16
"""
import argparse

from shardbart.design import exact_optimality_probability, random_assignment_optimality_rate


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--B", type=int, nargs="+", default=[2, 4, 8, 16])
    p.add_argument("--batches", type=int, default=10_000)
    p.add_argument("--draws-per-batch", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    print("B,simulated_rate,exact_probability")
    for B in args.B:
        rate = random_assignment_optimality_rate(args.n, B, args.batches, args.seed,
                                                 args.draws_per_batch)
        print(f"{B},{rate:.6e},{exact_optimality_probability(args.n, B):.6e}")


if __name__ == "__main__":
    main()
