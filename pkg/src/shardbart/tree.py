"""Binary regression trees and the rectangular partitions they induce.

Trees are immutable values stored as flat index-linked node arrays in
preorder, so node 0 is always the root. A split rule sends ``x[var] < cut``
to the left child and everything else (including ``x[var] == cut``) to the
right child. Cut values come from an equispaced grid of ``numcut`` interior
points of [0, 1] shared by every dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, Union

import numpy as np

from .errors import InputError, MoveError, StateError

NO_NODE = -1


@dataclass(frozen=True)
class CutGrid:
    """``numcut`` equispaced cut values ``(k + 1) / (numcut + 1)`` per dimension."""

    d: int
    numcut: int

    def __post_init__(self):
        if self.d < 1:
            raise InputError(f"grid dimension must be >= 1, got {self.d}")
        if self.numcut < 1:
            raise InputError(f"numcut must be >= 1, got {self.numcut}")

    @property
    def values(self) -> np.ndarray:
        return np.arange(1, self.numcut + 1) / (self.numcut + 1)

    def value(self, cut_index: int) -> float:
        if not 0 <= cut_index < self.numcut:
            raise InputError(f"cut index {cut_index} outside grid of size {self.numcut}")
        return (cut_index + 1) / (self.numcut + 1)

    def bins(self, X) -> np.ndarray:
        """Number of grid values <= x, so that ``x < c_k`` iff ``bin <= k``."""
        X = np.asarray(X, dtype=float)
        return np.searchsorted(self.values, X, side="right").astype(np.int32)

    def nearest_index(self, value: float) -> int:
        k = int(round(value * (self.numcut + 1))) - 1
        return min(max(k, 0), self.numcut - 1)


@dataclass(frozen=True)
class SplitRule:
    var: int
    cut_index: int
    cut_value: float

    @classmethod
    def on_grid(cls, grid: CutGrid, var: int, cut_index: int) -> "SplitRule":
        if not 0 <= var < grid.d:
            raise InputError(f"variable {var} outside domain of dimension {grid.d}")
        return cls(var, cut_index, grid.value(cut_index))


@dataclass(frozen=True)
class Rectangle:
    lower: np.ndarray
    upper: np.ndarray

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        inside_upper = (x < self.upper) | ((self.upper == 1.0) & (x == 1.0))
        return bool(np.all((x >= self.lower) & inside_upper))


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """A binary tree in preorder node arrays.

    Internal nodes carry ``var >= 0`` and a cut index; terminal nodes carry
    ``var == -1`` and a leaf value ``mu`` (NaN when unset).
    """

    grid: CutGrid
    parent: np.ndarray
    left: np.ndarray
    right: np.ndarray
    var: np.ndarray
    cut: np.ndarray
    mu: np.ndarray = field(repr=False)

    @classmethod
    def root(cls, grid: CutGrid, mu: float = float("nan")) -> "RegressionTree":
        neg = np.array([NO_NODE], dtype=np.int64)
        return cls(grid, neg.copy(), neg.copy(), neg.copy(), neg.copy(), neg.copy(),
                   np.array([mu], dtype=float))

    @property
    def n_nodes(self) -> int:
        return len(self.var)

    def is_leaf(self, node: int) -> bool:
        return self.var[node] == NO_NODE

    def leaves(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.var == NO_NODE)]

    def internal_nodes(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.var != NO_NODE)]

    def nog_nodes(self) -> list[int]:
        """Internal nodes whose two children are both terminal."""
        out = []
        for i in self.internal_nodes():
            if self.is_leaf(self.left[i]) and self.is_leaf(self.right[i]):
                out.append(i)
        return out

    def rule(self, node: int) -> SplitRule | None:
        if self.is_leaf(node):
            return None
        k = int(self.cut[node])
        return SplitRule(int(self.var[node]), k, self.grid.value(k))

    def depth(self, node: int) -> int:
        d = 0
        while self.parent[node] != NO_NODE:
            node = self.parent[node]
            d += 1
        return d

    @property
    def max_depth(self) -> int:
        return max(self.depth(i) for i in self.leaves())

    def ancestors(self, node: int) -> Iterator[tuple[int, bool]]:
        """Yield ``(ancestor, went_left)`` pairs from the node up to the root."""
        while self.parent[node] != NO_NODE:
            p = int(self.parent[node])
            yield p, self.left[p] == node
            node = p

    def cut_bounds(self, node: int, var: int) -> tuple[int, int]:
        """Open interval ``(lo, hi)`` of cut indices usable for ``var`` at ``node``."""
        lo, hi = -1, self.grid.numcut
        for p, went_left in self.ancestors(node):
            if self.var[p] == var:
                if went_left:
                    hi = min(hi, int(self.cut[p]))
                else:
                    lo = max(lo, int(self.cut[p]))
        return lo, hi

    def available_cuts(self, node: int, var: int) -> range:
        lo, hi = self.cut_bounds(node, var)
        return range(lo + 1, hi)

    def path_code(self, node: int) -> int:
        """Heap-style code of the root-to-node path: root 1, children 2p and 2p+1."""
        bits = []
        for p, went_left in self.ancestors(node):
            bits.append(0 if went_left else 1)
        code = 1
        for b in reversed(bits):
            code = 2 * code + b
        return code

    def with_mu(self, mu: Sequence[float] | dict) -> "RegressionTree":
        """Return a copy with leaf values set, from a leaf-ordered sequence or a mapping."""
        new_mu = np.full(self.n_nodes, np.nan)
        leaves = self.leaves()
        if isinstance(mu, dict):
            for leaf, value in mu.items():
                new_mu[leaf] = value
        else:
            if len(mu) != len(leaves):
                raise InputError(f"expected {len(leaves)} leaf values, got {len(mu)}")
            new_mu[leaves] = mu
        return RegressionTree(self.grid, self.parent, self.left, self.right, self.var,
                              self.cut, new_mu)

    def same_topology(self, other: "RegressionTree") -> bool:
        return (self.grid == other.grid
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("parent", "left", "right", "var", "cut")))

    def __eq__(self, other):
        if not isinstance(other, RegressionTree):
            return NotImplemented
        return self.same_topology(other) and np.array_equal(self.mu, other.mu, equal_nan=True)

    __hash__ = None

    def check_invariants(self, require_mu: bool = False, X=None, min_leaf: int = 1):
        """Raise ``StateError`` if the tree is malformed.

        With ``X`` given, also require every leaf to hold at least
        ``min_leaf`` rows of it.
        """
        n = self.n_nodes
        if self.parent[0] != NO_NODE:
            raise StateError("node 0 is not the root")
        seen = 0
        for i in range(n):
            internal = self.var[i] != NO_NODE
            has_kids = (self.left[i] != NO_NODE, self.right[i] != NO_NODE)
            if internal != has_kids[0] or internal != has_kids[1]:
                raise StateError(f"node {i} has {sum(has_kids)} children")
            if internal:
                if not 0 <= self.var[i] < self.grid.d:
                    raise StateError(f"node {i} splits on variable {self.var[i]}")
                if not 0 <= self.cut[i] < self.grid.numcut:
                    raise StateError(f"node {i} has cut index {self.cut[i]}")
                for c in (self.left[i], self.right[i]):
                    if self.parent[c] != i:
                        raise StateError(f"child {c} does not point back to {i}")
                if not np.isnan(self.mu[i]):
                    raise StateError(f"internal node {i} carries a leaf value")
                seen += 2
            elif require_mu and np.isnan(self.mu[i]):
                raise StateError(f"leaf {i} has no value")
        if seen != n - 1:
            raise StateError("node arrays are not a single connected tree")
        order = list(_preorder(self.left, self.right))
        if order != list(range(n)):
            raise StateError("nodes are not stored in preorder")
        if X is not None:
            counts = np.bincount(leaf_indices(self, X), minlength=n)
            for leaf in self.leaves():
                if counts[leaf] < min_leaf:
                    raise StateError(f"leaf {leaf} holds {counts[leaf]} < {min_leaf} rows")
            if n > 2 * len(X):
                raise StateError(f"{n} nodes exceed twice the {len(X)} bound rows")


def _preorder(left, right, root: int = 0) -> Iterator[int]:
    stack = [root]
    while stack:
        i = stack.pop()
        yield i
        if left[i] != NO_NODE:
            stack.append(int(right[i]))
            stack.append(int(left[i]))


def _canonical(grid, parent, left, right, var, cut, mu, root=0) -> RegressionTree:
    """Renumber a (possibly sparse) node table into preorder."""
    order = list(_preorder(left, right, root))
    remap = {old: new for new, old in enumerate(order)}
    n = len(order)
    P = np.full(n, NO_NODE, dtype=np.int64)
    L = np.full(n, NO_NODE, dtype=np.int64)
    R = np.full(n, NO_NODE, dtype=np.int64)
    V = np.full(n, NO_NODE, dtype=np.int64)
    C = np.full(n, NO_NODE, dtype=np.int64)
    M = np.full(n, np.nan)
    for old, new in remap.items():
        if old != root and parent[old] != NO_NODE:
            P[new] = remap[int(parent[old])]
        if left[old] != NO_NODE:
            L[new] = remap[int(left[old])]
            R[new] = remap[int(right[old])]
            V[new] = var[old]
            C[new] = cut[old]
        else:
            M[new] = mu[old]
    return RegressionTree(grid, P, L, R, V, C, M)


def _check_x(tree: RegressionTree, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) != tree.grid.d:
        raise InputError(f"expected a point of dimension {tree.grid.d}, got shape {x.shape}")
    return x


def leaf_of(tree: RegressionTree, x) -> int:
    """Terminal node whose rectangle contains ``x``."""
    x = _check_x(tree, x)
    node = 0
    while tree.var[node] != NO_NODE:
        k = int(tree.cut[node])
        node = tree.left[node] if x[tree.var[node]] < tree.grid.value(k) else tree.right[node]
    return int(node)


def leaf_indices(tree: RegressionTree, X) -> np.ndarray:
    """Vectorized ``leaf_of`` over the rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != tree.grid.d:
        raise InputError(f"expected {tree.grid.d} columns, got {X.shape[1]}")
    values = tree.grid.values
    out = np.zeros(len(X), dtype=np.int64)
    for node in range(tree.n_nodes):
        if tree.var[node] == NO_NODE:
            continue
        here = out == node
        go_left = X[:, tree.var[node]] < values[tree.cut[node]]
        out[here & go_left] = tree.left[node]
        out[here & ~go_left] = tree.right[node]
    return out


def node_rectangle(tree: RegressionTree, node: int) -> Rectangle:
    lower = np.zeros(tree.grid.d)
    upper = np.ones(tree.grid.d)
    for p, went_left in tree.ancestors(node):
        v = tree.var[p]
        c = tree.grid.value(int(tree.cut[p]))
        if went_left:
            upper[v] = min(upper[v], c)
        else:
            lower[v] = max(lower[v], c)
    return Rectangle(lower, upper)


def partition_rectangles(tree: RegressionTree) -> list[tuple[int, Rectangle]]:
    return [(leaf, node_rectangle(tree, leaf)) for leaf in tree.leaves()]


def basis_indicator(tree: RegressionTree, leaf: int, x) -> int:
    """Product of the split indicators along the root-to-``leaf`` path."""
    x = _check_x(tree, x)
    if not (0 <= leaf < tree.n_nodes) or not tree.is_leaf(leaf):
        raise InputError(f"node {leaf} is not a terminal node")
    value = 1
    for p, went_left in tree.ancestors(leaf):
        below = x[tree.var[p]] < tree.grid.value(int(tree.cut[p]))
        value *= int(below if went_left else not below)
    return value


def evaluate(tree: RegressionTree, x) -> float:
    mu = tree.mu[leaf_of(tree, x)]
    if np.isnan(mu):
        raise StateError("leaf value is unset")
    return float(mu)


# --- moves -----------------------------------------------------------------

@dataclass(frozen=True)
class Grow:
    leaf: int
    rule: SplitRule


@dataclass(frozen=True)
class Prune:
    node: int


@dataclass(frozen=True)
class Change:
    node: int
    rule: SplitRule


@dataclass(frozen=True)
class Swap:
    parent: int
    child: int


Move = Union[Grow, Prune, Change, Swap]


def _tables(tree):
    return (tree.parent.tolist(), tree.left.tolist(), tree.right.tolist(),
            tree.var.tolist(), tree.cut.tolist(), tree.mu.tolist())


def _check_rule(tree, rule):
    if not 0 <= rule.var < tree.grid.d:
        raise MoveError(f"rule variable {rule.var} outside domain")
    if not 0 <= rule.cut_index < tree.grid.numcut:
        raise MoveError(f"rule cut index {rule.cut_index} outside grid")


def _check_node(tree, node):
    if not 0 <= node < tree.n_nodes:
        raise MoveError(f"node {node} does not exist")


def mutate(tree: RegressionTree, move: Move) -> RegressionTree:
    """Apply a grow, prune, change or swap move and return the new tree."""
    P, L, R, V, C, M = _tables(tree)
    if isinstance(move, Grow):
        _check_node(tree, move.leaf)
        if not tree.is_leaf(move.leaf):
            raise MoveError(f"grow target {move.leaf} is not terminal")
        _check_rule(tree, move.rule)
        a, b = len(V), len(V) + 1
        P += [move.leaf, move.leaf]
        L += [NO_NODE, NO_NODE]
        R += [NO_NODE, NO_NODE]
        V += [NO_NODE, NO_NODE]
        C += [NO_NODE, NO_NODE]
        M += [M[move.leaf], M[move.leaf]]
        L[move.leaf], R[move.leaf] = a, b
        V[move.leaf], C[move.leaf] = move.rule.var, move.rule.cut_index
        M[move.leaf] = float("nan")
    elif isinstance(move, Prune):
        _check_node(tree, move.node)
        i = move.node
        if tree.is_leaf(i) or not (tree.is_leaf(L[i]) and tree.is_leaf(R[i])):
            raise MoveError(f"prune target {i} does not have two terminal children")
        M[i] = float("nan")
        L[i] = R[i] = V[i] = C[i] = NO_NODE
    elif isinstance(move, Change):
        _check_node(tree, move.node)
        if tree.is_leaf(move.node):
            raise MoveError(f"change target {move.node} is terminal")
        _check_rule(tree, move.rule)
        V[move.node], C[move.node] = move.rule.var, move.rule.cut_index
    elif isinstance(move, Swap):
        _check_node(tree, move.parent)
        _check_node(tree, move.child)
        p, c = move.parent, move.child
        if tree.is_leaf(p) or tree.is_leaf(c) or P[c] != p:
            raise MoveError(f"swap needs internal parent/child pair, got {p}, {c}")
        V[p], V[c] = V[c], V[p]
        C[p], C[c] = C[c], C[p]
    else:
        raise MoveError(f"unknown move {move!r}")
    return _canonical(tree.grid, P, L, R, V, C, np.asarray(M, dtype=float))


# --- priors ----------------------------------------------------------------

SplitProb = Callable[[int], float]


def galton_watson(alpha: float) -> SplitProb:
    """Node at depth ``k`` splits with probability ``alpha ** k`` (root depth 0)."""
    return lambda depth: alpha ** depth


def depth_power(base: float = 0.95, power: float = 2.0) -> SplitProb:
    """The common ``base * (1 + depth) ** -power`` split probability."""
    return lambda depth: base * (1.0 + depth) ** -power


def log_tree_prior(tree: RegressionTree, psplit: SplitProb, rule_prior: bool = True) -> float:
    """Log prior of a tree: split/stop probabilities times uniform rule choices.

    The rule at a node is chosen uniformly among variables with at least one
    usable cut, then uniformly among that variable's usable cuts.
    """
    total = 0.0
    for node in range(tree.n_nodes):
        p = psplit(tree.depth(node))
        if tree.is_leaf(node):
            total += np.log1p(-p) if p < 1 else -np.inf
            continue
        total += np.log(p) if p > 0 else -np.inf
        if rule_prior:
            n_cuts = [len(tree.available_cuts(node, v)) for v in range(tree.grid.d)]
            n_vars = sum(1 for c in n_cuts if c > 0)
            chosen = n_cuts[int(tree.var[node])]
            if chosen == 0 or int(tree.cut[node]) not in tree.available_cuts(node, int(tree.var[node])):
                return -np.inf
            total -= np.log(n_vars) + np.log(chosen)
    return float(total)


# --- text serialization ------------------------------------------------------

def dump_tree(tree: RegressionTree, axis: str = "x") -> str:
    lines = [f"tree d={tree.grid.d} numcut={tree.grid.numcut} axis={axis} nodes={tree.n_nodes}"]
    for i in range(tree.n_nodes):
        if tree.is_leaf(i):
            lines.append(f"{i} {tree.parent[i]} leaf {float(tree.mu[i])!r}")
        else:
            k = int(tree.cut[i])
            lines.append(f"{i} {tree.parent[i]} {tree.var[i]} {k} {tree.grid.value(k)!r}")
    return "\n".join(lines) + "\n"


def _header_fields(line: str) -> dict:
    parts = line.split()
    if not parts or parts[0] != "tree":
        raise InputError(f"expected a tree header, got {line!r}")
    return dict(p.split("=", 1) for p in parts[1:])


def parse_tree(lines: Sequence[str]) -> tuple[RegressionTree, str, int]:
    """Parse a tree from the start of ``lines``; return (tree, axis, lines consumed)."""
    fields = _header_fields(lines[0])
    grid = CutGrid(int(fields["d"]), int(fields["numcut"]))
    n = int(fields["nodes"])
    P = np.full(n, NO_NODE, dtype=np.int64)
    V = np.full(n, NO_NODE, dtype=np.int64)
    C = np.full(n, NO_NODE, dtype=np.int64)
    M = np.full(n, np.nan)
    for line in lines[1:n + 1]:
        tok = line.split()
        i = int(tok[0])
        P[i] = int(tok[1])
        if tok[2] == "leaf":
            M[i] = float(tok[3])
        else:
            V[i], C[i] = int(tok[2]), int(tok[3])
            if float(tok[4]) != grid.value(C[i]):
                raise InputError(f"node {i}: cut value {tok[4]} is off the grid")
    L = np.full(n, NO_NODE, dtype=np.int64)
    R = np.full(n, NO_NODE, dtype=np.int64)
    for i in range(1, n):
        p = P[i]
        if L[p] == NO_NODE:
            L[p] = i
        else:
            R[p] = i
    tree = RegressionTree(grid, P, L, R, V, C, M)
    tree.check_invariants()
    return tree, fields.get("axis", "x"), n + 1


def load_tree(text: str) -> tuple[RegressionTree, str]:
    tree, axis, _ = parse_tree(text.strip("\n").split("\n"))
    return tree, axis
