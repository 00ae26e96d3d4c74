"""Optimal-design criteria for tree partitions and integer allocation solvers.

Criteria on integer allocations are computed with ``fractions.Fraction`` so
that argmax sets can be compared exactly. Criteria on probability measures
use floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, NoFeasibleAllocation, NumericalError
from .tree import Rectangle, RegressionTree, node_rectangle


@dataclass(frozen=True)
class Allocation:
    """Per-leaf sample counts."""

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise InputError(f"counts must be nonnegative, got {counts}")
        if not counts:
            raise InputError("an allocation needs at least one leaf")
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> int:
        return sum(self.counts)

    @property
    def B(self) -> int:
        return len(self.counts)

    @property
    def q(self) -> int:
        return self.n // self.B

    @property
    def r(self) -> int:
        return self.n - self.q * self.B


@dataclass(frozen=True)
class LeafMeasure:
    masses: tuple[float, ...]

    def __post_init__(self):
        masses = tuple(float(m) for m in self.masses)
        if any(m < 0 for m in masses):
            raise InputError("leaf masses must be nonnegative")
        if abs(math.fsum(masses) - 1.0) > 1e-12:
            raise InputError(f"leaf masses sum to {math.fsum(masses)}, not 1")
        object.__setattr__(self, "masses", masses)

    @property
    def B(self) -> int:
        return len(self.masses)


@dataclass(frozen=True)
class BoxConstraint:
    lower: tuple[int, ...]
    upper: tuple[int, ...]

    def __post_init__(self):
        lower = tuple(int(v) for v in self.lower)
        upper = tuple(int(v) for v in self.upper)
        if len(lower) != len(upper) or not lower:
            raise InputError("box bounds must be nonempty and of equal length")
        if any(lo < 0 for lo in lower) or any(lo > hi for lo, hi in zip(lower, upper)):
            raise InputError(f"invalid box {lower} .. {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def B(self) -> int:
        return len(self.lower)


def _as_alloc(alloc) -> Allocation:
    return alloc if isinstance(alloc, Allocation) else Allocation(tuple(alloc))


def phi_fixed(alloc) -> Fraction:
    """D-criterion ``prod(n_b / n)`` as an exact fraction."""
    alloc = _as_alloc(alloc)
    if alloc.n == 0:
        raise InputError("phi is undefined for n = 0")
    return Fraction(math.prod(alloc.counts), alloc.n ** alloc.B)


def optimal_allocation(n: int, B: int) -> tuple[Allocation, Fraction]:
    """Balanced counts maximizing ``phi_fixed``, sorted ascending, and the max value."""
    if B < 1:
        raise InputError(f"B must be >= 1, got {B}")
    if B > n:
        raise InputError(f"need n >= B, got n={n}, B={B}")
    q, r = divmod(n, B)
    alloc = Allocation((q,) * (B - r) + (q + 1,) * r)
    value = Fraction(q, n) ** (B - r) * Fraction(q + 1, n) ** r
    return alloc, value


def b_expected_criterion(measure: LeafMeasure | Sequence[float]) -> float:
    """Product of the nonzero leaf masses (empty product is 1)."""
    masses = measure.masses if isinstance(measure, LeafMeasure) else LeafMeasure(tuple(measure)).masses
    return math.prod(m for m in masses if m > 0)


def expected_phi_mc(measure: LeafMeasure, n: int, trials: int, seed) -> float:
    """Monte Carlo mean of ``prod(n_b / n)`` with counts ~ Multinomial(n, masses)."""
    if trials < 1:
        raise InputError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, measure.masses, size=trials)
    return float(np.mean(np.prod(counts / n, axis=1)))


def expected_phi_exact(measure: LeafMeasure, n: int) -> float:
    """Exact ``E prod(n_b / n)`` under the multinomial: ``n!/(n-B)!/n^B * prod(p_b)``."""
    B = measure.B
    if B > n:
        return 0.0
    falling = math.exp(math.lgamma(n + 1) - math.lgamma(n - B + 1) - B * math.log(n))
    return falling * math.prod(measure.masses)


def _bisect_quantile(cdf: Callable[[float], float], level: float, tol: float) -> float:
    lo, hi = 0.0, 1.0
    width = 1.0
    while cdf(lo) > level:
        lo -= width
        width *= 2
        if width > 1e300:
            raise NumericalError("could not bracket quantile from below")
    width = 1.0
    while cdf(hi) < level:
        hi += width
        width *= 2
        if width > 1e300:
            raise NumericalError("could not bracket quantile from above")
    a_lo, a_hi = lo, hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cdf(mid) < level:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    # the same search for sup{x: cdf(x) <= level}; a gap means a flat stretch at this level
    lo, hi = a_lo, a_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cdf(mid) <= level:
            lo = mid
        else:
            hi = mid
    if 0.5 * (lo + hi) - x > 100 * tol:
        raise NumericalError(f"cdf is flat near x={x}; quantile {level} is not unique")
    if abs(cdf(x) - level) > 1e-6:
        raise NumericalError(f"cdf jumps over level {level} near x={x}")
    return x


def inverse_cdf_partition(marginal_cdfs: Sequence[Callable[[float], float]], B0: int,
                          tol: float = 1e-10) -> np.ndarray:
    """Cuts splitting each marginal into ``B0`` equal-mass intervals, shape ``(d, B0 - 1)``."""
    if B0 < 1:
        raise InputError(f"B0 must be >= 1, got {B0}")
    levels = np.arange(1, B0) / B0
    return np.array([[_bisect_quantile(cdf, lv, tol) for lv in levels] for cdf in marginal_cdfs],
                    dtype=float).reshape(len(marginal_cdfs), B0 - 1)


def _lexmin_feasible(n, lo, hi):
    out = []
    rest_hi = sum(hi)
    remaining = n
    for l, h in zip(lo, hi):
        rest_hi -= h
        v = max(l, remaining - rest_hi)
        out.append(v)
        remaining -= v
    return out


def constrained_allocation(n: int, box: BoxConstraint) -> Allocation:
    """Counts inside ``box`` summing to ``n`` that maximize ``prod(n_b)``.

    Ties are broken toward the lexicographically smallest vector. The
    objective is separable concave, so a point is optimal exactly when no
    unit transfer between two coordinates increases the product; the local
    search below stops at such a point and then walks to the lexicographic
    minimum of the optimal set by product-preserving exchanges.
    """
    lo, hi = list(box.lower), list(box.upper)
    B = box.B
    if sum(lo) > n or sum(hi) < n:
        raise NoFeasibleAllocation(f"no counts in {box.lower}..{box.upper} sum to {n}")
    lo_pos = [max(v, 1) for v in lo]
    if any(h < 1 for h in hi) or sum(lo_pos) > n:
        return Allocation(tuple(_lexmin_feasible(n, lo, hi)))

    lo = lo_pos
    x = [min(max(round(n / B), l), h) for l, h in zip(lo, hi)]
    while sum(x) < n:
        i = min((j for j in range(B) if x[j] < hi[j]), key=lambda j: x[j])
        x[i] += 1
    while sum(x) > n:
        i = max((j for j in range(B) if x[j] > lo[j]), key=lambda j: x[j])
        x[i] -= 1

    while True:
        can_up = [i for i in range(B) if x[i] < hi[i]]
        can_down = [j for j in range(B) if x[j] > lo[j]]
        if not can_up or not can_down:
            break
        i = min(can_up, key=lambda k: x[k])
        j = max(can_down, key=lambda k: x[k])
        if x[j] - x[i] <= 1:
            break
        x[i] += 1
        x[j] -= 1

    changed = True
    while changed:
        changed = False
        for i in range(B):
            if x[i] <= lo[i]:
                continue
            for j in range(B - 1, i, -1):
                if x[j] < hi[j] and x[i] == x[j] + 1:
                    x[i] -= 1
                    x[j] += 1
                    changed = True
                    break
            if changed:
                break
    return Allocation(tuple(x))


def minmax_criterion(alloc) -> Fraction | float:
    """Worst-case leaf variance factor ``max_b 1/n_b``; ``inf`` if a leaf is empty."""
    alloc = _as_alloc(alloc)
    if min(alloc.counts) == 0:
        return math.inf
    return Fraction(1, min(alloc.counts))


def a_criterion(alloc) -> Fraction | float:
    """Trace criterion ``sum_b 1/n_b``; ``inf`` if a leaf is empty."""
    alloc = _as_alloc(alloc)
    if min(alloc.counts) == 0:
        return math.inf
    return sum((Fraction(1, c) for c in alloc.counts), Fraction(0))


def depth_regions(tree: RegressionTree, kappa0: int) -> list[int]:
    """Nodes at depth ``kappa0`` along with terminal nodes above that depth."""
    if kappa0 < 0:
        raise InputError(f"kappa0 must be >= 0, got {kappa0}")
    out = []
    for node in range(tree.n_nodes):
        depth = tree.depth(node)
        if depth == kappa0 or (depth < kappa0 and tree.is_leaf(node)):
            out.append(node)
    return out


def depth_constrained_criterion(tree: RegressionTree, kappa0: int,
                                measure: Callable[[Rectangle], float] | None = None) -> float:
    """Product of region masses over the depth-``kappa0`` cut of ``tree``.

    ``measure`` maps a rectangle to its probability; the default is Lebesgue
    volume.
    """
    measure = measure or (lambda rect: rect.volume)
    masses = [measure(node_rectangle(tree, node)) for node in depth_regions(tree, kappa0)]
    return math.prod(m for m in masses if m > 0)


def _balanced_hits(counts: np.ndarray) -> np.ndarray:
    # With the total fixed, prod(n_b) is maximal iff all counts differ by at most one.
    return counts.max(axis=1) - counts.min(axis=1) <= 1


def _multinomial_equal(rng: np.random.Generator, n: int, B: int, size: int) -> np.ndarray:
    # Sequential conditional binomials; much faster than Generator.multinomial for many draws.
    counts = np.empty((size, B), dtype=np.int64)
    remaining = np.full(size, n, dtype=np.int64)
    for b in range(B - 1):
        counts[:, b] = rng.binomial(remaining, 1.0 / (B - b))
        remaining -= counts[:, b]
    counts[:, B - 1] = remaining
    return counts


def simulate_phi(n: int, B: int, batches: int, seed, draws_per_batch: int = 1000,
                 chunk: int = 1_000_000):
    """Yield ``(batch_index, counts)`` blocks of equal-mass multinomial assignments."""
    if batches < 1 or draws_per_batch < 1:
        raise InputError("batches and draws_per_batch must be >= 1")
    if B < 1 or n < 0:
        raise InputError(f"invalid n={n}, B={B}")
    rng = np.random.default_rng(seed)
    per_chunk = max(1, chunk // draws_per_batch)
    for start in range(0, batches, per_chunk):
        stop = min(batches, start + per_chunk)
        counts = _multinomial_equal(rng, n, B, (stop - start) * draws_per_batch)
        yield np.repeat(np.arange(start, stop), draws_per_batch), counts


def _count_hits(rng: np.random.Generator, n: int, B: int, size: int) -> int:
    # Draws the conditional binomials coordinate by coordinate and drops a draw
    # as soon as one count leaves {q, q + 1}; only survivors need later coordinates.
    q = n // B
    remaining = np.full(size, n, dtype=np.int64)
    for b in range(B - 1):
        c = rng.binomial(remaining, 1.0 / (B - b))
        keep = (c == q) | (c == q + 1)
        remaining = remaining[keep] - c[keep]
        if remaining.size == 0:
            return 0
    return int(np.count_nonzero((remaining == q) | (remaining == q + 1)))


def random_assignment_optimality_rate(n: int, B: int, batches: int, seed,
                                      draws_per_batch: int = 1000,
                                      chunk: int = 1_000_000) -> float:
    """Fraction of random equal-mass assignments that attain the maximal ``phi``.

    Each batch holds ``draws_per_batch`` independent Multinomial(n, 1/B)
    assignments; the rate is pooled over all of them.
    """
    if batches < 1 or draws_per_batch < 1:
        raise InputError("batches and draws_per_batch must be >= 1")
    if B < 1 or B > n:
        raise InputError(f"need 1 <= B <= n, got n={n}, B={B}")
    if B == 1:
        return 1.0
    rng = np.random.default_rng(seed)
    total = batches * draws_per_batch
    hits = 0
    for start in range(0, total, chunk):
        hits += _count_hits(rng, n, B, min(chunk, total - start))
    return hits / total


def exact_optimality_probability(n: int, B: int) -> float:
    """Multinomial pmf of the balanced counts times the number of their orderings."""
    q, r = divmod(n, B)
    log_p = (math.lgamma(n + 1) - (B - r) * math.lgamma(q + 1) - r * math.lgamma(q + 2)
             - n * math.log(B))
    log_orderings = math.lgamma(B + 1) - math.lgamma(B - r + 1) - math.lgamma(r + 1)
    return math.exp(log_p + log_orderings)
