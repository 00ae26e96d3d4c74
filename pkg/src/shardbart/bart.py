"""Sum-of-trees regression fitted by Metropolis-within-Gibbs backfitting."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import stats

from . import _kernels as K
from . import streams
from .errors import InputError, StateError
from .tree import CutGrid, RegressionTree


@dataclass(frozen=True)
class BartConfig:
    """Model and proposal settings for one sum-of-trees ensemble.

    ``prior`` is ``"galton_watson"`` (split probability ``alpha_split ** depth``)
    or ``"depth_power"`` (``base * (1 + depth) ** -power``). ``tau`` is the
    leaf prior sd; when ``None`` it is calibrated from the response range as
    ``(max y - min y) / (2 k sqrt(m))``. Birth and death share
    ``1 - probchv`` in the ratio ``pbd[0] : pbd[1]``.
    """

    m: int = 10
    numcut: int = 100
    alpha_split: float = 0.45
    prior: str = "galton_watson"
    base: float = 0.95
    power: float = 2.0
    tau: float | None = None
    k: float = 2.0
    sigma_fixed: float | None = None
    nu: float = 3.0
    lam: float | None = None
    sigquant: float = 0.9
    pbd: tuple[float, float] = (0.5, 0.5)
    probchv: float = 0.1
    min_leaf: int = 5

    def __post_init__(self):
        if self.m < 1:
            raise InputError(f"m must be >= 1, got {self.m}")
        if self.numcut < 1:
            raise InputError(f"numcut must be >= 1, got {self.numcut}")
        if self.min_leaf < 1:
            raise InputError(f"min_leaf must be >= 1, got {self.min_leaf}")
        pb, pd = self.pbd
        if not (0 <= pb <= 1 and 0 <= pd <= 1) or pb + pd > 1 + 1e-12 or pb + pd == 0:
            raise InputError(f"pbd must lie in [0,1]^2 with 0 < sum <= 1, got {self.pbd}")
        if not 0 <= self.probchv < 1:
            raise InputError(f"probchv must lie in [0, 1), got {self.probchv}")
        if self.prior not in ("galton_watson", "depth_power"):
            raise InputError(f"unknown tree prior {self.prior!r}")
        if self.prior == "galton_watson" and not 0 < self.alpha_split < 1:
            raise InputError(f"alpha_split must lie in (0, 1), got {self.alpha_split}")
        if self.tau is not None and self.tau <= 0:
            raise InputError("tau must be positive")
        if self.sigma_fixed is not None and self.sigma_fixed <= 0:
            raise InputError("sigma_fixed must be positive")
        object.__setattr__(self, "pbd", (float(pb), float(pd)))

    @property
    def prior_params(self) -> tuple[int, float, float]:
        if self.prior == "galton_watson":
            return K.GALTON_WATSON, float(self.alpha_split), 0.0
        return K.DEPTH_POWER, float(self.base), float(self.power)

    def split_prob(self, depth: int) -> float:
        kind, a, b = self.prior_params
        return float(K.split_prob(kind, a, b, depth))


@dataclass(frozen=True)
class Calibration:
    """Data-dependent quantities fixed before sampling."""

    offset: float
    tau: float
    nu: float
    lam: float
    sigma2_init: float


def calibrate(y: np.ndarray, config: BartConfig) -> Calibration:
    y = np.asarray(y, dtype=float)
    offset = float(np.mean(y)) if len(y) else 0.0
    spread = float(np.max(y) - np.min(y)) if len(y) else 0.0
    if spread <= 0:
        spread = 1.0
    tau = config.tau if config.tau is not None else spread / (2.0 * config.k * math.sqrt(config.m))
    sd = float(np.std(y, ddof=1)) if len(y) > 1 else 0.0
    if sd <= 0:
        sd = 0.1 * spread
    if config.lam is not None:
        lam = float(config.lam)
    else:
        lam = sd ** 2 * stats.chi2.ppf(1.0 - config.sigquant, config.nu) / config.nu
    sigma2 = config.sigma_fixed ** 2 if config.sigma_fixed is not None else sd ** 2
    return Calibration(offset, float(tau), float(config.nu), float(lam), float(sigma2))


def log_marginal_likelihood(r, sigma2: float, tau: float) -> float:
    """Log of the integral of ``prod N(r_i; mu, sigma2) N(mu; 0, tau^2)`` over ``mu``."""
    r = np.asarray(r, dtype=float)
    n = len(r)
    if n == 0:
        raise InputError("marginal likelihood needs at least one residual")
    if sigma2 <= 0 or tau <= 0:
        raise InputError("sigma2 and tau must be positive")
    t2 = tau * tau
    s, ss = float(np.sum(r)), float(np.dot(r, r))
    denom = sigma2 + n * t2
    return (-0.5 * n * math.log(2 * math.pi * sigma2) + 0.5 * math.log(sigma2 / denom)
            - ss / (2 * sigma2) + t2 * s * s / (2 * sigma2 * denom))


def draw_sigma2(sse: float, n: int, nu: float, lam: float, rng: np.random.Generator) -> float:
    """Scaled inverse chi-square draw given the residual sum of squares."""
    return float((nu * lam + sse) / rng.chisquare(nu + n))


def bin_inputs(X, grid: CutGrid) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != grid.d:
        raise InputError(f"expected {grid.d} columns, got {X.shape[1]}")
    if X.size and (np.nanmin(X) < 0 or np.nanmax(X) > 1 or np.isnan(X).any()):
        raise InputError("inputs must lie in [0, 1]; rescale before fitting")
    return np.ascontiguousarray(grid.bins(X))


@dataclass(frozen=True, eq=False)
class Forest:
    """Compact preorder storage for ``m`` trees sharing a cut grid.

    Leaf values are on the centered response scale; ``offset`` is added at
    prediction time.
    """

    grid: CutGrid
    parent: np.ndarray
    var: np.ndarray
    cut: np.ndarray
    mu: np.ndarray
    tree_start: np.ndarray
    offset: float = 0.0

    @property
    def m(self) -> int:
        return len(self.tree_start) - 1

    @cached_property
    def _children(self):
        return K.forest_children(self.parent, self.tree_start)

    def predict_binned(self, Xb: np.ndarray) -> np.ndarray:
        L, R = self._children
        out = np.empty(len(Xb))
        K.predict_forest(Xb, self.var, self.cut, self.mu, L, R, self.tree_start, out)
        return out + self.offset

    def predict(self, X) -> np.ndarray:
        return self.predict_binned(bin_inputs(X, self.grid))

    @property
    def trees(self) -> list[RegressionTree]:
        L, R = self._children
        out = []
        for j in range(self.m):
            a, b = self.tree_start[j], self.tree_start[j + 1]
            out.append(RegressionTree(
                self.grid,
                self.parent[a:b].astype(np.int64), L[a:b].astype(np.int64),
                R[a:b].astype(np.int64), self.var[a:b].astype(np.int64),
                self.cut[a:b].astype(np.int64), self.mu[a:b].copy()))
        return out

    @classmethod
    def from_trees(cls, trees: Sequence[RegressionTree], offset: float = 0.0) -> "Forest":
        grid = trees[0].grid
        sizes = [t.n_nodes for t in trees]
        start = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        cat = lambda attr, dt: np.concatenate([getattr(t, attr) for t in trees]).astype(dt)
        return cls(grid, cat("parent", np.int32), cat("var", np.int32), cat("cut", np.int32),
                   cat("mu", float), start, float(offset))

    def identical(self, other: "Forest") -> bool:
        """Exact equality of structure, leaf values and offset."""
        return (self.grid == other.grid and self.offset == other.offset
                and all(np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True)
                        for a in ("parent", "var", "cut", "mu", "tree_start")))


@dataclass(frozen=True, eq=False)
class BartSample:
    forest: Forest
    sigma2: float


class BartSampler:
    """Mutable ensemble state bound to one block of (binned) data.

    Owns its random stream; all updates of the trees go through it.
    """

    def __init__(self, Xb: np.ndarray, y: np.ndarray, config: BartConfig, tau: float,
                 rng: np.random.Generator, cap: int | None = None):
        self.Xb = np.ascontiguousarray(Xb, dtype=np.int32)
        self.y = np.ascontiguousarray(y, dtype=float)
        self.config = config
        self.tau2 = float(tau) ** 2
        self.rng = rng
        n = len(self.y)
        m = config.m
        cap = cap or 2 * max(n // config.min_leaf, 1) + 1
        self.var = np.full((m, cap), K.FREE, dtype=np.int64)
        self.var[:, 0] = K.LEAF
        self.cut = np.full((m, cap), -1, dtype=np.int64)
        self.left = np.full((m, cap), -1, dtype=np.int64)
        self.right = np.full((m, cap), -1, dtype=np.int64)
        self.parent = np.full((m, cap), -1, dtype=np.int64)
        self.depth = np.zeros((m, cap), dtype=np.int64)
        self.mu = np.zeros((m, cap))
        self.node_of = np.zeros((m, n), dtype=np.int64)
        self.fit = np.zeros(n)
        self.accepted = np.zeros(m, dtype=np.bool_)

    @property
    def n(self) -> int:
        return len(self.y)

    def _args(self):
        return (self.Xb, self.y, self.fit, self.var, self.cut, self.left, self.right,
                self.parent, self.depth, self.mu, self.node_of)

    def _move_args(self, sigma2):
        kind, a, b = self.config.prior_params
        pb, pd = self.config.pbd
        return (self.config.numcut, float(sigma2), self.tau2, kind, a, b, pb, pd,
                float(self.config.probchv), self.config.min_leaf)

    def step(self, sigma2: float) -> np.ndarray:
        """One backfitting sweep over all trees; returns per-tree acceptances."""
        K.sweep(*self._args(), *self._move_args(sigma2), self.rng, self.accepted)
        return self.accepted.copy()

    def mh_tree_update(self, j: int, sigma2: float) -> bool:
        """Structure move for tree ``j`` alone (leaf values left as they are)."""
        return bool(K.update_tree(*self._args(), j, *self._move_args(sigma2),
                                  True, False, self.rng))

    def draw_terminal_mus(self, j: int, sigma2: float) -> None:
        K.update_tree(*self._args(), j, *self._move_args(sigma2), False, True, self.rng)

    def sse(self) -> float:
        e = self.y - self.fit
        return float(np.dot(e, e))

    def snapshot(self, offset: float = 0.0) -> Forest:
        P, V, C, M, start = K.export_forest(self.var, self.cut, self.left, self.right,
                                            self.parent, self.mu)
        return Forest(CutGrid(self.Xb.shape[1], self.config.numcut), P, V, C, M, start,
                      float(offset))

    def load(self, forest: Forest) -> None:
        """Replace the trees by ``forest`` and rebuild the routing caches."""
        if forest.m != self.config.m:
            raise InputError(f"forest has {forest.m} trees, sampler expects {self.config.m}")
        if np.max(np.diff(forest.tree_start)) > self.var.shape[1]:
            self._grow_capacity(int(np.max(np.diff(forest.tree_start))))
        K.import_forest(forest.parent, forest.var, forest.cut, forest.mu, forest.tree_start,
                        self.var, self.cut, self.left, self.right, self.parent, self.depth,
                        self.mu)
        self.refresh()

    def _grow_capacity(self, cap):
        for name in ("var", "cut", "left", "right", "parent", "depth", "mu"):
            old = getattr(self, name)
            fill = K.FREE if name == "var" else (0 if name in ("depth", "mu") else -1)
            new = np.full((old.shape[0], cap), fill, dtype=old.dtype)
            new[:, :old.shape[1]] = old
            setattr(self, name, new)

    def refresh(self) -> None:
        """Re-route every observation and recompute the cached fit."""
        K.route_all(self.Xb, self.var, self.cut, self.left, self.right, self.node_of)
        K.recompute_fit(self.mu, self.node_of, self.fit)

    def rebind(self, Xb: np.ndarray, y: np.ndarray,
               rng: np.random.Generator | None) -> "BartSampler":
        """Copy of this ensemble bound to a different block of data."""
        other = BartSampler(Xb, y, self.config, math.sqrt(self.tau2), rng)
        other.load(self.snapshot())
        return other

    def min_leaf_count(self) -> int:
        return int(K.min_leaf_count(self.var, self.node_of)) if self.n else 0

    def leaf_design(self):
        """Stacked leaf-indicator Gram matrix ``Z'Z``, ``Z'y`` and the column map."""
        col, n_cols = K.leaf_columns(self.var)
        rows = np.arange(self.n, dtype=np.int64)
        G, b = K.forest_gram(self.node_of, col, n_cols, self.y, rows)
        return G, b, col

    def set_leaf_values(self, values: np.ndarray, col: np.ndarray) -> None:
        mask = col >= 0
        self.mu[mask] = values[col[mask]]
        K.recompute_fit(self.mu, self.node_of, self.fit)

    def check_consistency(self) -> None:
        """Raise ``StateError`` unless the caches match a from-scratch recomputation."""
        node_of = np.empty_like(self.node_of)
        K.route_all(self.Xb, self.var, self.cut, self.left, self.right, node_of)
        if not np.array_equal(node_of, self.node_of):
            raise StateError("cached leaf assignments disagree with the trees")
        fit = np.zeros(self.n)
        for j in range(self.config.m):
            fit += self.mu[j, self.node_of[j]]
        if not np.array_equal(fit, self.fit):
            raise StateError("cached fit disagrees with the leaf values")
        for tree in self.snapshot().trees:
            tree.check_invariants(require_mu=True)


def forest_log_marginal(G: np.ndarray, b: np.ndarray, yy: float, n: int,
                        sigma2: float, tau2: float) -> float:
    """Log marginal likelihood of data under a forest with leaf values integrated out.

    ``y ~ N(0, sigma2 I + tau2 Z Z')`` evaluated through the leaf-space
    Gram matrix ``G = Z'Z`` and ``b = Z'y``.
    """
    A = G + (sigma2 / tau2) * np.eye(len(b))
    L = np.linalg.cholesky(A)
    z = np.linalg.solve(L, b)
    logdet = 2.0 * np.sum(np.log(np.diag(L))) + len(b) * math.log(tau2 / sigma2)
    return float(-0.5 * n * math.log(2 * math.pi * sigma2) - 0.5 * logdet
                 - (yy - z @ z) / (2 * sigma2))


def draw_leaf_values(G, b, sigma2, tau2, rng) -> np.ndarray:
    """Joint Gaussian draw of all leaf values given the data."""
    A = G + (sigma2 / tau2) * np.eye(len(b))
    L = np.linalg.cholesky(A)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, b))
    return mean + math.sqrt(sigma2) * np.linalg.solve(L.T, rng.standard_normal(len(b)))


@dataclass(eq=False)
class BartFit:
    samples: list[BartSample]
    config: BartConfig
    calibration: Calibration
    accept_rate: np.ndarray = field(repr=False)
    seconds: np.ndarray = field(repr=False)


def _validate_data(X, y, config):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(X) != len(y):
        raise InputError(f"X has {len(X)} rows but y has {len(y)} values")
    if len(y) < config.min_leaf:
        raise InputError(f"need at least min_leaf={config.min_leaf} observations, got {len(y)}")
    if not np.all(np.isfinite(y)):
        raise InputError("responses must be finite")
    return X, y


def _check_iterations(n_mcmc, burn):
    if not 0 <= burn < n_mcmc:
        raise InputError(f"need 0 <= burn < n_mcmc, got burn={burn}, n_mcmc={n_mcmc}")


def bart_fit(X, y, config: BartConfig, n_mcmc: int, burn: int, seed: int) -> BartFit:
    """Run the sampler and keep the ``n_mcmc - burn`` post-burn-in states."""
    X, y = _validate_data(X, y, config)
    _check_iterations(n_mcmc, burn)
    grid = CutGrid(X.shape[1], config.numcut)
    cal = calibrate(y, config)
    sampler = BartSampler(bin_inputs(X, grid), y - cal.offset, config, cal.tau,
                          streams.shard_stream(seed, streams.ROOT_PATH, 0))
    sigma_rng = streams.stream(seed, streams.SIGMA)
    sigma2 = cal.sigma2_init
    samples, accepts, seconds = [], np.zeros((n_mcmc, config.m)), np.zeros(n_mcmc)
    for it in range(n_mcmc):
        start = time.perf_counter()
        accepts[it] = sampler.step(sigma2)
        if config.sigma_fixed is None:
            sigma2 = draw_sigma2(sampler.sse(), len(y), cal.nu, cal.lam, sigma_rng)
        seconds[it] = time.perf_counter() - start
        if it >= burn:
            samples.append(BartSample(sampler.snapshot(cal.offset), sigma2))
    return BartFit(samples, config, cal, accepts, seconds)


@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def intervals(self) -> np.ndarray:
        return np.column_stack([self.lo, self.hi])


def summarize_draws(draws: np.ndarray) -> Prediction:
    """Posterior mean and central 95% interval over the rows of ``draws``."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or len(draws) == 0:
        raise InputError("need at least one draw")
    lo, hi = np.quantile(draws, [0.025, 0.975], axis=0)
    return Prediction(draws.mean(axis=0), lo, hi)


def forest_draws(forests: Sequence[Forest], X) -> np.ndarray:
    if not forests:
        raise InputError("empty sample set")
    Xb = bin_inputs(X, forests[0].grid)
    return np.stack([f.predict_binned(Xb) for f in forests])


def bart_predict(samples: Sequence[BartSample] | BartFit, X) -> Prediction:
    if isinstance(samples, BartFit):
        samples = samples.samples
    return summarize_draws(forest_draws([s.forest for s in samples], X))
