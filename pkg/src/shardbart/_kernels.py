"""Compiled inner loops for the tree sampler.

Sampler trees live in fixed-capacity slot arrays of shape ``(m, cap)``:
``var`` is -2 for a free slot, -1 for a terminal node and the split variable
otherwise. Inputs are pre-binned so that ``x < c_k`` iff ``bin <= k``;
observation ``i`` of tree ``j`` sits in terminal slot ``node_of[j, i]``.
"""

import math

import numpy as np
from numba import njit

FREE = -2
LEAF = -1

GALTON_WATSON = 0
DEPTH_POWER = 1


@njit(cache=True, nogil=True)
def safe_log(x):
    if x <= 0.0:
        return -np.inf
    return math.log(x)


@njit(cache=True, nogil=True)
def split_prob(kind, a, b, depth):
    if kind == GALTON_WATSON:
        return a ** depth
    return a * (1.0 + depth) ** (-b)


@njit(cache=True, nogil=True)
def move_probs(n_internal, p_birth, p_death, p_change):
    """Probabilities of (grow, prune, change) given the number of internal nodes."""
    if n_internal == 0:
        if p_birth > 0.0:
            return 1.0, 0.0, 0.0
        return 0.0, 0.0, 0.0
    scale = (1.0 - p_change) / (p_birth + p_death)
    return p_birth * scale, p_death * scale, p_change


@njit(cache=True, nogil=True)
def leaf_lml(count, total, sigma2, tau2):
    # Terms of the conjugate normal marginal that do not cancel between partitions
    # of the same observations.
    denom = sigma2 + count * tau2
    return 0.5 * math.log(sigma2 / denom) + tau2 * total * total / (2.0 * sigma2 * denom)


@njit(cache=True, nogil=True)
def cut_bounds(var, cut, left, parent, j, node, d, lo, hi, numcut,
               swap_node, swap_var, swap_cut):
    """Fill open cut-index intervals ``(lo[v], hi[v])`` available at ``node``.

    ``swap_node`` (or -1) substitutes a hypothetical rule at one ancestor.
    Returns the number of variables with at least one usable cut.
    """
    for v in range(d):
        lo[v] = -1
        hi[v] = numcut
    child = node
    p = parent[j, node]
    while p >= 0:
        if p == swap_node:
            pv = swap_var
            pc = swap_cut
        else:
            pv = var[j, p]
            pc = cut[j, p]
        if left[j, p] == child:
            if pc < hi[pv]:
                hi[pv] = pc
        else:
            if pc > lo[pv]:
                lo[pv] = pc
        child = p
        p = parent[j, p]
    nv = 0
    for v in range(d):
        if hi[v] - lo[v] > 1:
            nv += 1
    return nv


@njit(cache=True, nogil=True)
def rule_logprior(var, cut, left, parent, j, node, d, lo, hi, numcut,
                  swap_node, swap_var, swap_cut):
    nv = cut_bounds(var, cut, left, parent, j, node, d, lo, hi, numcut,
                    swap_node, swap_var, swap_cut)
    v = var[j, node]
    c = cut[j, node]
    if c <= lo[v] or c >= hi[v]:
        return -np.inf
    return -math.log(nv) - math.log(hi[v] - lo[v] - 1)


@njit(cache=True, nogil=True)
def _free_slot(var, j):
    for s in range(var.shape[1]):
        if var[j, s] == FREE:
            return s
    return -1


@njit(cache=True, nogil=True)
def _pick_var(lo, hi, d, k):
    for v in range(d):
        if hi[v] - lo[v] > 1:
            if k == 0:
                return v
            k -= 1
    return -1


@njit(cache=True, nogil=True)
def _grow(Xb, r, var, cut, left, right, parent, depth, mu, node_of, j, d, numcut,
          sigma2, tau2, pkind, pa, pb, p_birth, p_death, p_change, min_leaf,
          n_internal, leaves, n_leaf, n_nog, lo, hi, rng):
    n = Xb.shape[0]
    leaf = leaves[int(rng.random() * n_leaf)]
    nv = cut_bounds(var, cut, left, parent, j, leaf, d, lo, hi, numcut, -1, 0, 0)
    if nv == 0:
        return False
    v = _pick_var(lo, hi, d, int(rng.random() * nv))
    c = lo[v] + 1 + int(rng.random() * (hi[v] - lo[v] - 1))
    nl = 0
    nr = 0
    sl = 0.0
    sr = 0.0
    for i in range(n):
        if node_of[j, i] == leaf:
            if Xb[i, v] <= c:
                nl += 1
                sl += r[i]
            else:
                nr += 1
                sr += r[i]
    if nl < min_leaf or nr < min_leaf:
        return False
    dep = depth[j, leaf]
    ps = split_prob(pkind, pa, pb, dep)
    ps_child = split_prob(pkind, pa, pb, dep + 1)
    par = parent[j, leaf]
    new_nog = n_nog + 1
    if par >= 0:
        sib = right[j, par] if left[j, par] == leaf else left[j, par]
        if var[j, sib] == LEAF:
            new_nog -= 1
    pg, _, _ = move_probs(n_internal, p_birth, p_death, p_change)
    _, pp_new, _ = move_probs(n_internal + 1, p_birth, p_death, p_change)
    log_ratio = (safe_log(ps) + 2.0 * safe_log(1.0 - ps_child) - safe_log(1.0 - ps)
                 + safe_log(pp_new) - math.log(new_nog) - safe_log(pg) + math.log(n_leaf)
                 + leaf_lml(nl, sl, sigma2, tau2) + leaf_lml(nr, sr, sigma2, tau2)
                 - leaf_lml(nl + nr, sl + sr, sigma2, tau2))
    if not (safe_log(rng.random()) < log_ratio):
        return False
    a = _free_slot(var, j)
    var[j, a] = LEAF
    b = _free_slot(var, j)
    var[j, b] = LEAF
    for s in (a, b):
        left[j, s] = -1
        right[j, s] = -1
        parent[j, s] = leaf
        depth[j, s] = dep + 1
        mu[j, s] = 0.0
        cut[j, s] = -1
    var[j, leaf] = v
    cut[j, leaf] = c
    left[j, leaf] = a
    right[j, leaf] = b
    for i in range(n):
        if node_of[j, i] == leaf:
            node_of[j, i] = a if Xb[i, v] <= c else b
    return True


@njit(cache=True, nogil=True)
def _prune(r, var, cut, left, right, parent, depth, mu, node_of, j,
           sigma2, tau2, pkind, pa, pb, p_birth, p_death, p_change,
           n_internal, n_leaf, nogs, n_nog, rng):
    n = r.shape[0]
    node = nogs[int(rng.random() * n_nog)]
    a = left[j, node]
    b = right[j, node]
    nl = 0
    nr = 0
    sl = 0.0
    sr = 0.0
    for i in range(n):
        s = node_of[j, i]
        if s == a:
            nl += 1
            sl += r[i]
        elif s == b:
            nr += 1
            sr += r[i]
    dep = depth[j, node]
    ps = split_prob(pkind, pa, pb, dep)
    ps_child = split_prob(pkind, pa, pb, dep + 1)
    _, pp, _ = move_probs(n_internal, p_birth, p_death, p_change)
    pg_new, _, _ = move_probs(n_internal - 1, p_birth, p_death, p_change)
    log_ratio = (safe_log(1.0 - ps) - safe_log(ps) - 2.0 * safe_log(1.0 - ps_child)
                 + safe_log(pg_new) - math.log(n_leaf - 1) - safe_log(pp) + math.log(n_nog)
                 + leaf_lml(nl + nr, sl + sr, sigma2, tau2)
                 - leaf_lml(nl, sl, sigma2, tau2) - leaf_lml(nr, sr, sigma2, tau2))
    if not (safe_log(rng.random()) < log_ratio):
        return False
    for i in range(n):
        s = node_of[j, i]
        if s == a or s == b:
            node_of[j, i] = node
    for s in (a, b):
        var[j, s] = FREE
        parent[j, s] = -1
    var[j, node] = LEAF
    cut[j, node] = -1
    left[j, node] = -1
    right[j, node] = -1
    mu[j, node] = 0.0
    return True


@njit(cache=True, nogil=True)
def _route_from(Xb, i, var, cut, left, right, j, node, swap_node, swap_var, swap_cut):
    s = node
    while var[j, s] >= 0:
        if s == swap_node:
            v = swap_var
            c = swap_cut
        else:
            v = var[j, s]
            c = cut[j, s]
        s = left[j, s] if Xb[i, v] <= c else right[j, s]
    return s


@njit(cache=True, nogil=True)
def _change(Xb, r, var, cut, left, right, parent, node_of, j, d, numcut,
            sigma2, tau2, min_leaf, internals, n_int, lo, hi, in_sub, stack,
            new_node, cnt_old, sum_old, cnt_new, sum_new, rng):
    n = Xb.shape[0]
    cap = var.shape[1]
    node = internals[int(rng.random() * n_int)]
    nv = cut_bounds(var, cut, left, parent, j, node, d, lo, hi, numcut, -1, 0, 0)
    v = _pick_var(lo, hi, d, int(rng.random() * nv))
    c = lo[v] + 1 + int(rng.random() * (hi[v] - lo[v] - 1))

    for s in range(cap):
        in_sub[s] = False
        cnt_old[s] = 0
        sum_old[s] = 0.0
        cnt_new[s] = 0
        sum_new[s] = 0.0
    top = 0
    stack[top] = node
    top += 1
    log_prior = 0.0
    lo2 = np.empty_like(lo)
    hi2 = np.empty_like(hi)
    while top > 0:
        top -= 1
        s = stack[top]
        in_sub[s] = True
        if var[j, s] >= 0:
            if s != node:
                log_prior += rule_logprior(var, cut, left, parent, j, s, d, lo2, hi2, numcut,
                                           node, v, c)
                log_prior -= rule_logprior(var, cut, left, parent, j, s, d, lo2, hi2, numcut,
                                           -1, 0, 0)
            stack[top] = left[j, s]
            stack[top + 1] = right[j, s]
            top += 2
    if log_prior == -np.inf:
        return False

    for i in range(n):
        s = node_of[j, i]
        if in_sub[s]:
            t = _route_from(Xb, i, var, cut, left, right, j, node, node, v, c)
            new_node[i] = t
            cnt_old[s] += 1
            sum_old[s] += r[i]
            cnt_new[t] += 1
            sum_new[t] += r[i]
    log_lik = 0.0
    for s in range(cap):
        if in_sub[s] and var[j, s] == LEAF:
            if cnt_new[s] < min_leaf:
                return False
            log_lik += leaf_lml(cnt_new[s], sum_new[s], sigma2, tau2)
            log_lik -= leaf_lml(cnt_old[s], sum_old[s], sigma2, tau2)
    if not (safe_log(rng.random()) < log_prior + log_lik):
        return False
    var[j, node] = v
    cut[j, node] = c
    for i in range(n):
        if in_sub[node_of[j, i]]:
            node_of[j, i] = new_node[i]
    return True


@njit(cache=True, nogil=True)
def update_tree(Xb, y, fit, var, cut, left, right, parent, depth, mu, node_of, j,
                numcut, sigma2, tau2, pkind, pa, pb, p_birth, p_death, p_change,
                min_leaf, do_move, do_mu, rng):
    """Backfitting step for tree ``j``: an MH structure move, then leaf draws.

    ``fit`` (sum of all tree fits) is updated in place. Returns whether the
    structure move was accepted.
    """
    n, d = Xb.shape
    cap = var.shape[1]
    r = np.empty(n)
    fit_minus = np.empty(n)
    for i in range(n):
        fit_minus[i] = fit[i] - mu[j, node_of[j, i]]
        r[i] = y[i] - fit_minus[i]

    ok = False
    if do_move:
        leaves = np.empty(cap, dtype=np.int64)
        nogs = np.empty(cap, dtype=np.int64)
        internals = np.empty(cap, dtype=np.int64)
        lo = np.empty(d, dtype=np.int64)
        hi = np.empty(d, dtype=np.int64)
        n_leaf = 0
        n_int = 0
        n_nog = 0
        for s in range(cap):
            vs = var[j, s]
            if vs == LEAF:
                leaves[n_leaf] = s
                n_leaf += 1
            elif vs >= 0:
                internals[n_int] = s
                n_int += 1
                if var[j, left[j, s]] == LEAF and var[j, right[j, s]] == LEAF:
                    nogs[n_nog] = s
                    n_nog += 1

        pg, pp, pc = move_probs(n_int, p_birth, p_death, p_change)
        u = rng.random()
        if u < pg:
            ok = _grow(Xb, r, var, cut, left, right, parent, depth, mu, node_of, j, d, numcut,
                       sigma2, tau2, pkind, pa, pb, p_birth, p_death, p_change, min_leaf,
                       n_int, leaves, n_leaf, n_nog, lo, hi, rng)
        elif u < pg + pp:
            ok = _prune(r, var, cut, left, right, parent, depth, mu, node_of, j,
                        sigma2, tau2, pkind, pa, pb, p_birth, p_death, p_change,
                        n_int, n_leaf, nogs, n_nog, rng)
        elif u < pg + pp + pc:
            ok = _change(Xb, r, var, cut, left, right, parent, node_of, j, d, numcut,
                         sigma2, tau2, min_leaf, internals, n_int, lo, hi,
                         np.zeros(cap, dtype=np.bool_), np.empty(cap + 2, dtype=np.int64),
                         np.empty(n, dtype=np.int64), np.zeros(cap, dtype=np.int64),
                         np.zeros(cap), np.zeros(cap, dtype=np.int64), np.zeros(cap), rng)

    if do_mu:
        cnt = np.zeros(cap, dtype=np.int64)
        sm = np.zeros(cap)
        for i in range(n):
            s = node_of[j, i]
            cnt[s] += 1
            sm[s] += r[i]
        for s in range(cap):
            if var[j, s] == LEAF:
                denom = sigma2 + cnt[s] * tau2
                mean = tau2 * sm[s] / denom
                sd = math.sqrt(sigma2 * tau2 / denom)
                mu[j, s] = mean + sd * rng.standard_normal()
    for i in range(n):
        fit[i] = fit_minus[i] + mu[j, node_of[j, i]]
    return ok


@njit(cache=True, nogil=True)
def sweep(Xb, y, fit, var, cut, left, right, parent, depth, mu, node_of,
          numcut, sigma2, tau2, pkind, pa, pb, p_birth, p_death, p_change,
          min_leaf, rng, accepted):
    """One backfitting pass over all trees.

    ``fit`` is recomputed from scratch, in tree order, at the end so that it
    equals the sum of the stored leaf values exactly.
    """
    for j in range(var.shape[0]):
        accepted[j] = update_tree(Xb, y, fit, var, cut, left, right, parent, depth, mu,
                                  node_of, j, numcut, sigma2, tau2, pkind, pa, pb,
                                  p_birth, p_death, p_change, min_leaf, True, True, rng)
    recompute_fit(mu, node_of, fit)


@njit(cache=True, nogil=True)
def recompute_fit(mu, node_of, fit):
    m, n = node_of.shape
    for i in range(n):
        fit[i] = 0.0
    for j in range(m):
        for i in range(n):
            fit[i] += mu[j, node_of[j, i]]


@njit(cache=True, nogil=True)
def route_all(Xb, var, cut, left, right, node_of):
    """Recompute every observation's terminal slot from the root."""
    m = var.shape[0]
    for j in range(m):
        for i in range(Xb.shape[0]):
            node_of[j, i] = _route_from(Xb, i, var, cut, left, right, j, 0, -1, 0, 0)


@njit(cache=True, nogil=True)
def min_leaf_count(var, node_of):
    """Smallest observation count over all terminal slots of all trees."""
    m, cap = var.shape
    best = node_of.shape[1]
    cnt = np.zeros(cap, dtype=np.int64)
    for j in range(m):
        cnt[:] = 0
        for i in range(node_of.shape[1]):
            cnt[node_of[j, i]] += 1
        for s in range(cap):
            if var[j, s] == LEAF and cnt[s] < best:
                best = cnt[s]
    return best


@njit(cache=True, nogil=True)
def export_forest(var, cut, left, right, parent, mu):
    """Flatten all trees into preorder arrays plus ``tree_start`` offsets."""
    m, cap = var.shape
    total = 0
    for j in range(m):
        for s in range(cap):
            if var[j, s] != FREE:
                total += 1
    P = np.empty(total, dtype=np.int32)
    V = np.empty(total, dtype=np.int32)
    C = np.empty(total, dtype=np.int32)
    M = np.empty(total)
    start = np.empty(m + 1, dtype=np.int64)
    remap = np.empty(cap, dtype=np.int64)
    stack = np.empty(cap + 2, dtype=np.int64)
    pos = 0
    for j in range(m):
        start[j] = pos
        top = 1
        stack[0] = 0
        k = 0
        while top > 0:
            top -= 1
            s = stack[top]
            remap[s] = k
            ps = parent[j, s]
            P[pos + k] = remap[ps] if ps >= 0 else -1
            if var[j, s] >= 0:
                V[pos + k] = var[j, s]
                C[pos + k] = cut[j, s]
                M[pos + k] = np.nan
                stack[top] = right[j, s]
                stack[top + 1] = left[j, s]
                top += 2
            else:
                V[pos + k] = -1
                C[pos + k] = -1
                M[pos + k] = mu[j, s]
            k += 1
        pos += k
    start[m] = pos
    return P, V, C, M, start


@njit(cache=True, nogil=True)
def import_forest(P, V, C, M, start, var, cut, left, right, parent, depth, mu):
    """Load preorder forest arrays into slot arrays (slot = preorder index)."""
    m = start.shape[0] - 1
    var[:, :] = FREE
    left[:, :] = -1
    right[:, :] = -1
    parent[:, :] = -1
    cut[:, :] = -1
    for j in range(m):
        base = start[j]
        for k in range(start[j + 1] - base):
            var[j, k] = V[base + k]
            cut[j, k] = C[base + k]
            mu[j, k] = M[base + k] if V[base + k] < 0 else 0.0
            p = P[base + k]
            parent[j, k] = p
            if p >= 0:
                depth[j, k] = depth[j, p] + 1
                if left[j, p] < 0:
                    left[j, p] = k
                else:
                    right[j, p] = k
            else:
                depth[j, k] = 0


@njit(cache=True, nogil=True)
def forest_children(P, start):
    total = P.shape[0]
    L = np.full(total, -1, dtype=np.int32)
    R = np.full(total, -1, dtype=np.int32)
    m = start.shape[0] - 1
    for j in range(m):
        base = start[j]
        for k in range(1, start[j + 1] - base):
            p = base + P[base + k]
            if L[p] < 0:
                L[p] = k
            else:
                R[p] = k
    return L, R


@njit(cache=True, nogil=True)
def predict_forest(Xb, V, C, M, L, R, start, out):
    """``out[i] = sum over trees of the leaf value reached by row i``."""
    m = start.shape[0] - 1
    for i in range(Xb.shape[0]):
        total = 0.0
        for j in range(m):
            base = start[j]
            k = 0
            while V[base + k] >= 0:
                if Xb[i, V[base + k]] <= C[base + k]:
                    k = L[base + k]
                else:
                    k = R[base + k]
            total += M[base + k]
        out[i] = total


@njit(cache=True, nogil=True)
def leaf_columns(var):
    """Map each terminal slot to a column index of the stacked leaf design."""
    m, cap = var.shape
    col = np.full((m, cap), -1, dtype=np.int64)
    k = 0
    for j in range(m):
        for s in range(cap):
            if var[j, s] == LEAF:
                col[j, s] = k
                k += 1
    return col, k


@njit(cache=True, nogil=True)
def forest_gram(node_of, col, K, y, rows):
    """Gram matrix of the leaf-indicator design restricted to ``rows``, plus ``Z'y``."""
    m = node_of.shape[0]
    G = np.zeros((K, K))
    b = np.zeros(K)
    idx = np.empty(m, dtype=np.int64)
    for t in range(rows.shape[0]):
        i = rows[t]
        for j in range(m):
            idx[j] = col[j, node_of[j, i]]
        yi = y[i]
        for j in range(m):
            a = idx[j]
            b[a] += yi
            G[a, a] += 1.0
            for k in range(j + 1, m):
                c = idx[k]
                G[a, c] += 1.0
                G[c, a] += 1.0
    return G, b


@njit(cache=True, nogil=True)
def leaf_counts(var, node_of, rows):
    """Per-slot observation counts restricted to ``rows``."""
    m, cap = var.shape
    cnt = np.zeros((m, cap), dtype=np.int64)
    for t in range(rows.shape[0]):
        i = rows[t]
        for j in range(m):
            cnt[j, node_of[j, i]] += 1
    return cnt
