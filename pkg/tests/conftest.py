import numpy as np
import pytest

from shardbart.tree import CutGrid, Grow, RegressionTree, SplitRule, mutate


def random_tree(rng, d=2, numcut=20, max_depth=4, n_grow=None, with_mu=True):
    """Apply random grow moves to leaves shallower than ``max_depth``."""
    grid = CutGrid(d, numcut)
    tree = RegressionTree.root(grid)
    n_grow = int(rng.integers(0, 2 ** max_depth)) if n_grow is None else n_grow
    for _ in range(n_grow):
        candidates = []
        for leaf in tree.leaves():
            if tree.depth(leaf) >= max_depth:
                continue
            vars_ok = [v for v in range(d) if len(tree.available_cuts(leaf, v))]
            if vars_ok:
                candidates.append((leaf, vars_ok))
        if not candidates:
            break
        leaf, vars_ok = candidates[int(rng.integers(len(candidates)))]
        v = int(rng.choice(vars_ok))
        k = int(rng.choice(list(tree.available_cuts(leaf, v))))
        tree = mutate(tree, Grow(leaf, SplitRule.on_grid(grid, v, k)))
    if with_mu:
        tree = tree.with_mu(rng.normal(size=len(tree.leaves())))
    return tree


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
