"""Sharded sum-of-trees model.

Each observation carries a frozen auxiliary value ``u`` in [0, 1]. A small
tree over ``u`` partitions the rows into shards, each shard owns its own
ensemble, and predictions marginalize over ``u``.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from . import streams
from .bart import (BartConfig, BartSampler, Calibration, Forest, Prediction, _check_iterations,
                   _validate_data, bin_inputs, calibrate, draw_leaf_values, draw_sigma2,
                   forest_log_marginal, summarize_draws)
from .errors import InputError, ShardTooSmall
from .tree import CutGrid, Grow, Prune, RegressionTree, SplitRule, leaf_indices, mutate, \
    node_rectangle


@dataclass(frozen=True)
class SbtConfig:
    """Settings for the sharded model.

    ``shardpsplit`` scales the split probability of the u-tree, which is
    ``shardpsplit * alpha_u ** depth`` below ``shardepth`` and 0 at it.
    ``u_cut_subset`` optionally restricts u-tree proposals to the listed
    grid indices. ``init_u_tree`` is ``"balanced"`` (the equal-mass tree of
    full depth) or ``"root"``.
    """

    bart: BartConfig = field(default_factory=BartConfig)
    shardepth: int = 1
    randshard: bool = False
    aux: str = "uniform"
    n_min: int = 10
    u_numcut: int = 127
    shardpsplit: float = 1.0
    alpha_u: float | None = None
    u_cut_subset: tuple[int, ...] | None = None
    init_u_tree: str = "balanced"
    tc: int = 1

    def __post_init__(self):
        if self.shardepth < 0:
            raise InputError(f"shardepth must be >= 0, got {self.shardepth}")
        if self.aux not in ("uniform", "deterministic"):
            raise InputError(f"aux mode must be 'uniform' or 'deterministic', got {self.aux!r}")
        if self.n_min < 1:
            raise InputError("n_min must be >= 1")
        if not 0 < self.shardpsplit <= 1:
            raise InputError(f"shardpsplit must lie in (0, 1], got {self.shardpsplit}")
        if self.tc < 1:
            raise InputError(f"tc must be >= 1, got {self.tc}")
        if self.init_u_tree not in ("balanced", "root"):
            raise InputError(f"unknown init_u_tree {self.init_u_tree!r}")
        if self.u_cut_subset is not None:
            subset = tuple(sorted(set(int(k) for k in self.u_cut_subset)))
            if not subset or subset[0] < 0 or subset[-1] >= self.u_numcut:
                raise InputError("u_cut_subset must be nonempty grid indices")
            object.__setattr__(self, "u_cut_subset", subset)

    @property
    def u_grid(self) -> CutGrid:
        return CutGrid(1, self.u_numcut)

    def u_split_prob(self, depth: int) -> float:
        if depth >= self.shardepth:
            return 0.0
        alpha = self.bart.alpha_split if self.alpha_u is None else self.alpha_u
        return self.shardpsplit * alpha ** depth


# --- auxiliary variable -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AuxAssignment:
    u: np.ndarray
    mode: str

    def __post_init__(self):
        if len(self.u) and (np.min(self.u) < 0 or np.max(self.u) > 1):
            raise InputError("auxiliary values must lie in [0, 1]")


def init_aux(X, mode: str = "uniform", seed: int = 0,
             rule: Callable[[np.ndarray], float] | None = None,
             randshard: bool = False) -> AuxAssignment:
    """Draw or assign the frozen auxiliary values.

    Uniform mode draws iid Unif(0, 1). Deterministic mode applies ``rule`` to
    each row when given, and otherwise spreads rows evenly over (0, 1) in
    blocks: in dataset order when ``randshard``, otherwise in a random order.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if mode == "uniform":
        u = streams.stream(seed, streams.AUX).random(n)
    elif mode == "deterministic":
        if rule is not None:
            u = np.array([float(rule(x)) for x in X], dtype=float)
        else:
            rank = np.arange(n)
            if not randshard:
                rank = np.empty(n, dtype=np.int64)
                rank[streams.stream(seed, streams.AUX).permutation(n)] = np.arange(n)
            u = (rank + 0.5) / max(n, 1)
    else:
        raise InputError(f"unknown aux mode {mode!r}")
    return AuxAssignment(u, mode)


def step_rule(threshold: float, low_value: float, high_value: float, var: int = 0):
    """``u = low_value`` when ``x[var] <= threshold``, else ``high_value``."""
    return lambda x: low_value if x[var] <= threshold else high_value


# --- sharding tree --------------------------------------------------------------

def balanced_u_tree(grid: CutGrid, depth: int) -> RegressionTree:
    """Tree of the given depth cutting [0, 1] into ``2 ** depth`` equal intervals."""
    tree = RegressionTree.root(grid)
    for level in range(depth):
        # node ids shift after every grow, so address leaves by their rectangles
        for rect in [node_rectangle(tree, leaf) for leaf in tree.leaves()]:
            mid = 0.5 * (rect.lower[0] + rect.upper[0])
            tree = _grow_leaf_at(tree, grid, rect, mid)
    return tree


def _grow_leaf_at(tree, grid, rect, value):
    for leaf in tree.leaves():
        r = node_rectangle(tree, leaf)
        if np.array_equal(r.lower, rect.lower) and np.array_equal(r.upper, rect.upper):
            k = grid.nearest_index(value)
            return mutate(tree, Grow(leaf, SplitRule.on_grid(grid, 0, k)))
    raise AssertionError("rectangle not found")


@dataclass(frozen=True, eq=False)
class ShardPartition:
    leaves: tuple[int, ...]
    index_sets: tuple[np.ndarray, ...]

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(ix) for ix in self.index_sets)


def shard_partition(tree_u: RegressionTree, aux: AuxAssignment | np.ndarray,
                    n_min: int | None = None) -> ShardPartition:
    """Row indices per u-tree leaf, leaves in preorder.

    Raises ``ShardTooSmall`` when ``n_min`` is given and some shard is smaller.
    """
    u = aux.u if isinstance(aux, AuxAssignment) else np.asarray(aux, dtype=float)
    leaves = tuple(tree_u.leaves())
    if len(u):
        where = leaf_indices(tree_u, u.reshape(-1, 1))
    else:
        where = np.zeros(0, dtype=np.int64)
    sets = tuple(np.flatnonzero(where == leaf) for leaf in leaves)
    part = ShardPartition(leaves, sets)
    if n_min is not None and min(part.counts) < n_min:
        raise ShardTooSmall(part.counts, n_min)
    return part


# --- state ------------------------------------------------------------------------

@dataclass
class Shard:
    rows: np.ndarray
    sampler: BartSampler
    path: int
    birth: int


@dataclass(frozen=True, eq=False)
class SbtSample:
    tree_u: RegressionTree
    forests: tuple[Forest, ...]
    sigma2: float
    sizes: tuple[int, ...]

    @property
    def B(self) -> int:
        return len(self.forests)

    def shard_volumes(self) -> np.ndarray:
        return np.array([node_rectangle(self.tree_u, leaf).volume
                         for leaf in self.tree_u.leaves()])


class SbtState:
    """Sharding tree, one ensemble per shard, and the shared noise variance."""

    def __init__(self, X, y, aux: AuxAssignment, config: SbtConfig, seed: int):
        X, y = _validate_data(X, y, config.bart)
        if len(aux.u) != len(y):
            raise InputError(f"{len(aux.u)} auxiliary values for {len(y)} rows")
        self.config = config
        self.seed = seed
        self.grid = CutGrid(X.shape[1], config.bart.numcut)
        self.cal: Calibration = calibrate(y, config.bart)
        self.Xb = bin_inputs(X, self.grid)
        self.y = y - self.cal.offset
        self.yy = self.y * self.y
        self.u = aux.u
        self.ub = config.u_grid.bins(self.u.reshape(-1, 1))[:, 0]
        self.sigma2 = self.cal.sigma2_init
        self.sigma_rng = streams.stream(seed, streams.SIGMA)
        self.move_rng = streams.stream(seed, streams.SHARDING)

        depth = config.shardepth if config.init_u_tree == "balanced" else 0
        self.tree_u = balanced_u_tree(config.u_grid, depth)
        try:
            part = shard_partition(self.tree_u, self.u, max(config.n_min, config.bart.min_leaf))
        except ShardTooSmall as exc:
            raise InputError(f"initial shards {exc.sizes} violate n_min={exc.n_min}") from exc
        self.shards: dict[int, Shard] = {}
        for leaf, rows in zip(part.leaves, part.index_sets):
            path = self.tree_u.path_code(leaf)
            self.shards[path] = Shard(rows, self._new_sampler(rows, path, 0), path, 0)

    def _new_sampler(self, rows, path, birth):
        return BartSampler(self.Xb[rows], self.y[rows], self.config.bart, self.cal.tau,
                           streams.shard_stream(self.seed, path, birth))

    def ordered_shards(self) -> list[Shard]:
        return [self.shards[self.tree_u.path_code(leaf)] for leaf in self.tree_u.leaves()]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(s.rows) for s in self.ordered_shards())

    def sweep_shards(self, pool: ThreadPoolExecutor | None) -> np.ndarray:
        shards = self.ordered_shards()
        sigma2 = self.sigma2
        if pool is None or len(shards) == 1:
            acc = [s.sampler.step(sigma2) for s in shards]
        else:
            acc = list(pool.map(lambda s: s.sampler.step(sigma2), shards))
        return np.concatenate(acc)

    def draw_sigma2(self) -> None:
        if self.config.bart.sigma_fixed is not None:
            return
        sse = sum(s.sampler.sse() for s in self.ordered_shards())
        self.sigma2 = draw_sigma2(sse, len(self.y), self.cal.nu, self.cal.lam, self.sigma_rng)

    def sample(self) -> SbtSample:
        shards = self.ordered_shards()
        return SbtSample(self.tree_u, tuple(s.sampler.snapshot(self.cal.offset) for s in shards),
                         self.sigma2, tuple(len(s.rows) for s in shards))

    def check_partition(self) -> None:
        rows = np.sort(np.concatenate([s.rows for s in self.shards.values()]))
        if not np.array_equal(rows, np.arange(len(self.y))):
            raise AssertionError("shard rows are not a partition of the data")
        part = shard_partition(self.tree_u, self.u)
        for leaf, ix in zip(part.leaves, part.index_sets):
            if not np.array_equal(self.shards[self.tree_u.path_code(leaf)].rows, ix):
                raise AssertionError("shard rows disagree with the sharding tree")

    # --- sharding-tree move -----------------------------------------------------

    def _forest_lml(self, sampler: BartSampler, local_rows: np.ndarray | None = None):
        col, n_cols = K.leaf_columns(sampler.var)
        rows = (np.arange(sampler.n, dtype=np.int64) if local_rows is None
                else local_rows.astype(np.int64))
        G, b = K.forest_gram(sampler.node_of, col, n_cols, sampler.y, rows)
        yy = float(np.sum(sampler.y[rows] ** 2))
        return G, b, yy, len(rows)

    def _lml(self, G, b, yy, n):
        return forest_log_marginal(G, b, yy, n, self.sigma2, self.cal.tau ** 2)

    def _allowed_cuts(self, tree, leaf) -> list[int]:
        lo, hi = tree.cut_bounds(leaf, 0)
        subset = self.config.u_cut_subset
        if subset is None:
            return list(range(lo + 1, hi))
        return [k for k in subset if lo < k < hi]

    def _move_options(self, tree):
        growable = [l for l in tree.leaves() if tree.depth(l) < self.config.shardepth]
        nogs = tree.nog_nodes()
        if growable and nogs:
            return growable, nogs, 0.5, 0.5
        if growable:
            return growable, nogs, 1.0, 0.0
        if nogs:
            return growable, nogs, 0.0, 1.0
        return growable, nogs, 0.0, 0.0

    def _log_u_prior_split_ratio(self, depth, n_cuts):
        # log of p(split at depth) * rule prob * (1 - p_child)^2 / (1 - p(depth))
        ps = self.config.u_split_prob(depth)
        pc = self.config.u_split_prob(depth + 1)
        return (_log(ps) - math.log(n_cuts) + 2 * _log(1 - pc) - _log(1 - ps))

    def sharding_tree_update(self, iteration: int) -> tuple[str, bool]:
        """Propose a grow or prune of the sharding tree; returns (move, accepted)."""
        tree = self.tree_u
        growable, nogs, pg, pp = self._move_options(tree)
        if pg == 0 and pp == 0:
            return "none", False
        rng = self.move_rng
        if rng.random() < pg:
            return "grow", self._propose_grow(tree, growable, pg, iteration)
        return "prune", self._propose_prune(tree, nogs, pp, iteration)

    def _propose_grow(self, tree, growable, pg, iteration) -> bool:
        rng = self.move_rng
        leaf = growable[int(rng.random() * len(growable))]
        cuts = self._allowed_cuts(tree, leaf)
        if not cuts:
            return False
        k = cuts[int(rng.random() * len(cuts))]
        parent = self.shards[tree.path_code(leaf)]
        go_left = self.ub[parent.rows] <= k
        left_local = np.flatnonzero(go_left)
        right_local = np.flatnonzero(~go_left)
        floor = max(self.config.n_min, self.config.bart.min_leaf)
        if len(left_local) < floor or len(right_local) < floor:
            return False
        new_tree = mutate(tree, Grow(leaf, SplitRule.on_grid(self.config.u_grid, 0, k)))
        _, new_nogs, _, pp_new = self._move_options(new_tree)
        log_ratio = (self._log_u_prior_split_ratio(tree.depth(leaf), len(cuts))
                     + _log(pp_new) - math.log(len(new_nogs))
                     - _log(pg) + math.log(len(growable)) + math.log(len(cuts)))
        log_u = _log(rng.random())
        if log_ratio == -math.inf:
            return False
        GL, bL, yyL, nL = self._forest_lml(parent.sampler, left_local)
        GR, bR, yyR, nR = self._forest_lml(parent.sampler, right_local)
        min_leaf = self.config.bart.min_leaf
        if np.min(np.diag(GL)) < min_leaf or np.min(np.diag(GR)) < min_leaf:
            return False
        log_ratio += (self._lml(GL, bL, yyL, nL) + self._lml(GR, bR, yyR, nR)
                      - self._lml(GL + GR, bL + bR, yyL + yyR, nL + nR))
        if not log_u < log_ratio:
            return False

        del self.shards[parent.path]
        self.tree_u = new_tree
        for local in (left_local, right_local):
            rows = parent.rows[local]
            self._install(rows, parent.sampler, iteration)
        return True

    def _propose_prune(self, tree, nogs, pp, iteration) -> bool:
        rng = self.move_rng
        node = nogs[int(rng.random() * len(nogs))]
        a, b = int(tree.left[node]), int(tree.right[node])
        sa, sb = self.shards[tree.path_code(a)], self.shards[tree.path_code(b)]
        keep = sa if len(sa.rows) >= len(sb.rows) else sb
        path = tree.path_code(node)
        new_tree = mutate(tree, Prune(node))
        growable_new, _, pg_new, _ = self._move_options(new_tree)
        # the restored leaf has the same ancestors as ``node``
        cuts = self._allowed_cuts(tree, node)
        log_ratio = (-self._log_u_prior_split_ratio(tree.depth(node), len(cuts))
                     + _log(pg_new) - math.log(len(growable_new)) - math.log(len(cuts))
                     - _log(pp) + math.log(len(nogs)))
        log_u = _log(rng.random())
        if log_ratio == -math.inf or math.isnan(log_ratio):
            return False
        rows = np.sort(np.concatenate([sa.rows, sb.rows]))
        merged = keep.sampler.rebind(self.Xb[rows], self.y[rows], None)
        log_ratio += (self._lml(*self._forest_lml(merged))
                      - self._lml(*self._forest_lml(sa.sampler))
                      - self._lml(*self._forest_lml(sb.sampler)))
        if not log_u < log_ratio:
            return False
        del self.shards[sa.path], self.shards[sb.path]
        self.tree_u = new_tree
        merged.rng = streams.shard_stream(self.seed, path, iteration)
        self._redraw_leaves(merged)
        self.shards[path] = Shard(rows, merged, path, iteration)
        return True

    def _install(self, rows, source: BartSampler, iteration):
        leaf = leaf_indices(self.tree_u, self.u[rows[:1]].reshape(-1, 1))[0]
        path = self.tree_u.path_code(int(leaf))
        sampler = source.rebind(self.Xb[rows], self.y[rows],
                                streams.shard_stream(self.seed, path, iteration))
        self._redraw_leaves(sampler)
        self.shards[path] = Shard(rows, sampler, path, iteration)

    def _redraw_leaves(self, sampler: BartSampler):
        G, b, col = sampler.leaf_design()
        values = draw_leaf_values(G, b, self.sigma2, self.cal.tau ** 2, sampler.rng)
        sampler.set_leaf_values(values, col)


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


# --- fitting ------------------------------------------------------------------------

@dataclass(eq=False)
class SbtFit:
    samples: list[SbtSample]
    config: SbtConfig
    calibration: Calibration
    aux: AuxAssignment
    diagnostics: list[dict] = field(repr=False)


def sbt_fit(X, y, config: SbtConfig, n_mcmc: int, burn: int, seed: int,
            aux: AuxAssignment | None = None,
            rule: Callable[[np.ndarray], float] | None = None) -> SbtFit:
    """Fit the sharded model; keeps the ``n_mcmc - burn`` post-burn-in states.

    Each iteration makes one sharding-tree proposal, then one sweep of every
    shard's ensemble (in parallel over ``config.tc`` workers), then draws the
    shared noise variance. Results do not depend on ``tc``.
    """
    _check_iterations(n_mcmc, burn)
    if aux is None:
        aux = init_aux(X, config.aux, seed, rule=rule, randshard=config.randshard)
    state = SbtState(X, y, aux, config, seed)
    samples, diagnostics = [], []
    pool = ThreadPoolExecutor(config.tc) if config.tc > 1 else None
    try:
        for it in range(n_mcmc):
            start = time.perf_counter()
            move, accepted = ("none", False)
            if config.shardepth > 0:
                move, accepted = state.sharding_tree_update(it)
            acc = state.sweep_shards(pool)
            state.draw_sigma2()
            seconds = time.perf_counter() - start
            diagnostics.append({
                "iteration": it, "u_move": move, "u_accepted": int(accepted),
                "tree_accept_rate": float(acc.mean()), "n_shards": len(state.shards),
                "shard_sizes": "/".join(str(s) for s in state.sizes),
                "sigma2": state.sigma2, "seconds": seconds,
            })
            if it >= burn:
                samples.append(state.sample())
    finally:
        if pool is not None:
            pool.shutdown()
    return SbtFit(samples, config, state.cal, aux, diagnostics)


# --- prediction -----------------------------------------------------------------------

@dataclass(frozen=True)
class WeightSpec:
    weights: np.ndarray
    eps: np.ndarray
    alpha_smooth: float
    d: int


def optimal_weights(shard_sizes: Sequence[int], alpha_smooth: float, d: int) -> WeightSpec:
    """Weights proportional to each shard's contraction rate
    ``n_b ** (-alpha / (2 alpha + d)) * sqrt(log n_b)``."""
    sizes = np.asarray(shard_sizes, dtype=float)
    if sizes.ndim != 1 or len(sizes) == 0:
        raise InputError("need at least one shard size")
    if np.any(sizes < 2):
        raise InputError(f"shard sizes must be >= 2, got {tuple(shard_sizes)}")
    if not 0 < alpha_smooth <= 1:
        raise InputError(f"alpha_smooth must lie in (0, 1], got {alpha_smooth}")
    if d < 1:
        raise InputError(f"d must be >= 1, got {d}")
    if np.all(sizes == sizes[0]):
        B = len(sizes)
        eps = np.full(B, sizes[0] ** (-alpha_smooth / (2 * alpha_smooth + d))
                      * math.sqrt(math.log(sizes[0])))
        return WeightSpec(np.full(B, 1.0 / B), eps, alpha_smooth, d)
    eps = sizes ** (-alpha_smooth / (2 * alpha_smooth + d)) * np.sqrt(np.log(sizes))
    return WeightSpec(eps / eps.sum(), eps, alpha_smooth, d)


def _shard_fits(sample: SbtSample, Xb: np.ndarray) -> np.ndarray:
    return np.stack([f.predict_binned(Xb) for f in sample.forests])


def sbt_predict_draws(samples: Sequence[SbtSample] | SbtFit, X, seed: int = 0,
                      n_draws: int = 1, aggregate: str = "route",
                      alpha_smooth: float = 1.0) -> np.ndarray:
    """Posterior predictive draws, one row per (sample, draw).

    ``route`` draws a fresh ``u*`` per point and draw and evaluates the shard
    it falls in. ``volume`` and ``optimal`` return one explicit weighted sum
    of shard fits per sample, weighted by u-volume or by ``optimal_weights``.
    """
    if isinstance(samples, SbtFit):
        samples = samples.samples
    if not samples:
        raise InputError("empty sample set")
    if n_draws < 1:
        raise InputError("n_draws must be >= 1")
    grid = samples[0].forests[0].grid
    Xb = bin_inputs(X, grid)
    rng = streams.stream(seed, streams.PREDICT)
    rows = []
    for sample in samples:
        fits = _shard_fits(sample, Xb)
        if aggregate == "route":
            leaves = np.array(sample.tree_u.leaves())
            position = np.full(sample.tree_u.n_nodes, -1)
            position[leaves] = np.arange(len(leaves))
            for _ in range(n_draws):
                u_star = rng.random(len(Xb))
                b = position[leaf_indices(sample.tree_u, u_star.reshape(-1, 1))]
                rows.append(fits[b, np.arange(len(Xb))])
        elif aggregate == "volume":
            rows.append(sample.shard_volumes() @ fits)
        elif aggregate == "optimal":
            w = optimal_weights(sample.sizes, alpha_smooth, grid.d).weights
            rows.append(w @ fits)
        else:
            raise InputError(f"unknown aggregation {aggregate!r}")
    return np.stack(rows)


def sbt_predict(samples: Sequence[SbtSample] | SbtFit, X, seed: int = 0, n_draws: int = 1,
                aggregate: str = "route", alpha_smooth: float = 1.0) -> Prediction:
    return summarize_draws(sbt_predict_draws(samples, X, seed, n_draws, aggregate, alpha_smooth))
