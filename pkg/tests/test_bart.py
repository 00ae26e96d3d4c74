import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from shardbart import streams
from shardbart.bart import (BartConfig, BartSample, BartSampler, Forest, bart_fit, bart_predict,
                            bin_inputs, calibrate, draw_leaf_values, draw_sigma2,
                            forest_log_marginal, log_marginal_likelihood, summarize_draws)
from shardbart.errors import InputError
from shardbart.tree import CutGrid, Grow, RegressionTree, SplitRule, mutate

# Split-state probability of the toy chain below, from scipy's multivariate
# normal density of each leaf block (independent of the package formulas).
TOY_SPLIT_PROB = 0.7498240148200986


def _toy_data():
    rng = np.random.default_rng(0)
    n = 20
    x = (np.arange(n) + 0.5) / n
    y = 0.2 * (x >= 0.5) + 0.3 * rng.standard_normal(n)
    return x, y


def _quad_lml(r, sigma2, tau):
    r = np.asarray(r)
    sd = math.sqrt(sigma2)

    def g(mu):
        return np.sum(stats.norm.logpdf(r, mu, sd)) + stats.norm.logpdf(mu, 0.0, tau)

    n = len(r)
    prec = n / sigma2 + 1 / tau ** 2
    center = (r.sum() / sigma2) / prec
    width = 30 / math.sqrt(prec)
    peak = g(center)
    val, _ = integrate.quad(lambda mu: math.exp(g(mu) - peak), center - width, center + width,
                            epsabs=0, epsrel=1e-13, limit=200, points=[center])
    return peak + math.log(val)


def test_lml_single_observation():
    assert math.isclose(log_marginal_likelihood([1.0], 1.0, 1.0), -1.5155121234846454,
                        rel_tol=0, abs_tol=1e-14)


def test_lml_tau_to_zero_limit():
    r = np.array([0.3, -1.2, 0.8])
    target = np.sum(stats.norm.logpdf(r, 0, 0.7))
    assert abs(log_marginal_likelihood(r, 0.49, 1e-7) - target) < 1e-9


def test_lml_matches_quadrature():
    rng = np.random.default_rng(99)
    for _ in range(50):
        n = int(rng.integers(1, 30))
        sigma2 = float(rng.uniform(0.05, 4.0))
        tau = float(rng.uniform(0.05, 3.0))
        r = rng.normal(rng.normal(0, 1), math.sqrt(sigma2), size=n)
        assert abs(log_marginal_likelihood(r, sigma2, tau) - _quad_lml(r, sigma2, tau)) < 1e-8


def test_lml_rejects_empty():
    with pytest.raises(InputError):
        log_marginal_likelihood([], 1.0, 1.0)


def test_forest_marginal_matches_dense_gaussian():
    rng = np.random.default_rng(5)
    n, K = 12, 4
    Z = np.zeros((n, K))
    Z[np.arange(n), rng.integers(0, 2, n)] = 1
    Z[np.arange(n), 2 + rng.integers(0, 2, n)] = 1
    y = rng.normal(size=n)
    sigma2, tau2 = 0.7, 0.3
    dense = stats.multivariate_normal.logpdf(y, np.zeros(n), sigma2 * np.eye(n) + tau2 * Z @ Z.T)
    got = forest_log_marginal(Z.T @ Z, Z.T @ y, float(y @ y), n, sigma2, tau2)
    assert abs(got - dense) < 1e-10


def test_joint_leaf_draw_moments():
    rng = np.random.default_rng(6)
    n, K = 10, 3
    Z = np.zeros((n, K))
    Z[np.arange(n), rng.integers(0, K, n)] = 1
    y = rng.normal(size=n)
    sigma2, tau2 = 0.5, 2.0
    G, b = Z.T @ Z, Z.T @ y
    post_cov = np.linalg.inv(G / sigma2 + np.eye(K) / tau2)
    post_mean = post_cov @ (b / sigma2)
    draws = np.array([draw_leaf_values(G, b, sigma2, tau2, rng) for _ in range(20000)])
    se = np.sqrt(np.diag(post_cov) / len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - post_mean) < 4 * se)
    assert np.allclose(np.cov(draws.T), post_cov, atol=0.05 * np.max(post_cov))


def test_toy_chain_matches_enumerated_posterior():
    x, y = _toy_data()
    sigma, tau = 0.3, 0.5
    # independent oracle, recomputed so the frozen value stays honest
    L = lambda v: stats.multivariate_normal.logpdf(
        v, np.zeros(len(v)), sigma ** 2 * np.eye(len(v)) + tau ** 2 * np.ones((len(v), len(v))))
    log_root = math.log(0.05) + L(y)
    log_split = (math.log(0.95) + 2 * math.log(1 - 0.95 / 4) + L(y[x < 0.5]) + L(y[x >= 0.5]))
    assert math.isclose(1 / (1 + math.exp(log_root - log_split)), TOY_SPLIT_PROB, rel_tol=1e-12)

    cfg = BartConfig(m=1, numcut=1, prior="depth_power", tau=tau, sigma_fixed=sigma, min_leaf=1)
    sampler = BartSampler(bin_inputs(x[:, None], CutGrid(1, 1)), y, cfg, tau,
                          np.random.default_rng(1))
    iters, split = 100_000, 0
    for _ in range(iters):
        sampler.step(sigma ** 2)
        split += sampler.var[0, 0] >= 0
    assert abs(split / iters - TOY_SPLIT_PROB) < 0.02


def test_change_to_same_rule_is_always_accepted():
    x, y = _toy_data()
    # numcut=1 and d=1: every change proposal reproduces the current rule,
    # and grow proposals find no free cut
    cfg = BartConfig(m=1, numcut=1, tau=0.5, sigma_fixed=0.3, min_leaf=1, pbd=(1.0, 0.0),
                     probchv=0.5)
    sampler = BartSampler(bin_inputs(x[:, None], CutGrid(1, 1)), y, cfg, 0.5,
                          np.random.default_rng(2))
    grid = CutGrid(1, 1)
    split = mutate(RegressionTree.root(grid), Grow(0, SplitRule.on_grid(grid, 0, 0)))
    sampler.load(Forest.from_trees([split.with_mu([0.0, 0.1])]))
    accepted = sum(sampler.mh_tree_update(0, 0.09) for _ in range(4000))
    assert sampler.var[0, 0] == 0
    # accepted exactly when the change branch was drawn, about half the time
    assert abs(accepted / 4000 - 0.5) < 0.03
    sampler.check_consistency()


def test_single_observation_never_grows():
    cfg = BartConfig(m=3, numcut=10, min_leaf=1, sigma_fixed=0.1)
    fit = bart_fit(np.array([[0.4, 0.6]]), np.array([1.0]), cfg, 200, 0, seed=3)
    assert fit.accept_rate.sum() == 0
    assert all(t.n_nodes == 1 for s in fit.samples for t in s.forest.trees)


def test_leaf_value_moments():
    rng = np.random.default_rng(7)
    n = 15
    y = rng.normal(0.4, 1.0, size=n)
    sigma2, tau = 0.8, 0.6
    cfg = BartConfig(m=1, numcut=5, tau=tau, sigma_fixed=math.sqrt(sigma2))
    sampler = BartSampler(np.zeros((n, 1), dtype=np.int32), y, cfg, tau, rng)
    draws = np.empty(100_000)
    for i in range(len(draws)):
        sampler.draw_terminal_mus(0, sigma2)
        draws[i] = sampler.mu[0, 0]
    t2 = tau ** 2
    mean = t2 * y.sum() / (sigma2 + n * t2)
    var = sigma2 * t2 / (sigma2 + n * t2)
    assert abs(draws.mean() - mean) < 3 * math.sqrt(var / len(draws))
    # variance of a sample variance for normal draws is 2 var^2 / (N - 1)
    assert abs(draws.var(ddof=1) - var) < 3 * var * math.sqrt(2 / (len(draws) - 1))


def test_leaf_value_limits():
    y = np.array([2.0, 2.0, 2.0, 2.0])
    cfg = BartConfig(m=1, numcut=5, tau=1e3, sigma_fixed=1.0)
    sampler = BartSampler(np.zeros((4, 1), dtype=np.int32), y, cfg, 1e3, np.random.default_rng(0))
    draws = []
    for _ in range(4000):
        sampler.draw_terminal_mus(0, 1.0)
        draws.append(sampler.mu[0, 0])
    # the flat-prior posterior is N(2, 1/4)
    assert abs(np.mean(draws) - 2.0) < 3 * 0.5 / math.sqrt(4000)
    # huge noise: the posterior is the N(0, 1) prior
    big = BartSampler(np.zeros((4, 1), dtype=np.int32), y, cfg, 1.0, np.random.default_rng(0))
    draws = []
    for _ in range(4000):
        big.draw_terminal_mus(0, 1e12)
        draws.append(big.mu[0, 0])
    assert abs(np.mean(draws)) < 3 / math.sqrt(4000)


def test_sigma2_prior_draw_when_no_data():
    rng = np.random.default_rng(8)
    nu, lam = 5.0, 0.3
    draws = np.array([draw_sigma2(0.0, 0, nu, lam, rng) for _ in range(40000)])
    # scaled inverse chi-square mean nu * lam / (nu - 2)
    assert abs(draws.mean() - nu * lam / (nu - 2)) < 0.02


def test_sigma_fixed_is_left_alone():
    rng = np.random.default_rng(9)
    X = rng.random((50, 2))
    fit = bart_fit(X, X[:, 0], BartConfig(m=2, sigma_fixed=0.25), 30, 5, seed=1)
    assert all(s.sigma2 == 0.0625 for s in fit.samples)


def test_sigma_posterior_concentrates_at_truth():
    rng = np.random.default_rng(10)
    X = rng.random((2000, 1))
    y = (X[:, 0] > 0.5) + 0.1 * rng.standard_normal(2000)
    fit = bart_fit(X, y, BartConfig(m=10), 400, 200, seed=2)
    sigma = np.sqrt([s.sigma2 for s in fit.samples])
    assert np.all(np.abs(sigma - 0.1) < 0.02)


def test_residual_consistency_every_hundred_iterations():
    rng = np.random.default_rng(11)
    X = rng.random((300, 3))
    y = np.sin(6 * X[:, 0]) + X[:, 1] + 0.1 * rng.standard_normal(300)
    cfg = BartConfig(m=8, numcut=30, min_leaf=5)
    cal = calibrate(y, cfg)
    grid = CutGrid(3, cfg.numcut)
    sampler = BartSampler(bin_inputs(X, grid), y - cal.offset, cfg, cal.tau,
                          np.random.default_rng(12))
    sigma_rng = np.random.default_rng(13)
    sigma2 = cal.sigma2_init
    for it in range(1, 1001):
        sampler.step(sigma2)
        sigma2 = draw_sigma2(sampler.sse(), len(y), cal.nu, cal.lam, sigma_rng)
        if it % 100 == 0:
            sampler.check_consistency()
            residual = (y - cal.offset) - sampler.fit
            fresh = (y - cal.offset) - sampler.snapshot().predict(X)
            assert np.array_equal(residual, fresh)
            for tree in sampler.snapshot().trees:
                tree.check_invariants(require_mu=True, X=X, min_leaf=cfg.min_leaf)


def test_bart_fit_is_deterministic():
    rng = np.random.default_rng(14)
    X = rng.random((120, 2))
    y = X[:, 0] * 3 + rng.normal(0, 0.2, 120)
    a = bart_fit(X, y, BartConfig(m=5), 60, 10, seed=21)
    b = bart_fit(X, y, BartConfig(m=5), 60, 10, seed=21)
    assert all(s.forest.identical(t.forest) and s.sigma2 == t.sigma2
               for s, t in zip(a.samples, b.samples))
    c = bart_fit(X, y, BartConfig(m=5), 60, 10, seed=22)
    assert not all(s.forest.identical(t.forest) for s, t in zip(a.samples, c.samples))


def test_bart_fit_uses_root_shard_stream():
    rng = np.random.default_rng(15)
    X = rng.random((40, 1))
    y = X[:, 0]
    cfg = BartConfig(m=2, sigma_fixed=0.1, numcut=10)
    fit = bart_fit(X, y, cfg, 5, 4, seed=3)
    cal = calibrate(y, cfg)
    sampler = BartSampler(bin_inputs(X, CutGrid(1, 10)), y - cal.offset, cfg, cal.tau,
                          streams.shard_stream(3, streams.ROOT_PATH, 0))
    for _ in range(5):
        sampler.step(0.01)
    assert sampler.snapshot(cal.offset).identical(fit.samples[-1].forest)


def test_step_function_rmse():
    rng = np.random.default_rng(16)
    X = rng.random((500, 1))
    y = (X[:, 0] > 0.5) + 0.01 * rng.standard_normal(500)
    fit = bart_fit(X, y, BartConfig(m=10), 600, 200, seed=4)
    X_test = rng.random((1000, 1))
    pred = bart_predict(fit, X_test)
    assert math.sqrt(np.mean((pred.mean - (X_test[:, 0] > 0.5)) ** 2)) < 0.1


def test_constant_recovery():
    rng = np.random.default_rng(17)
    X = rng.random((200, 2))
    c = 3.0
    fit = bart_fit(X, np.full(200, c), BartConfig(m=10, sigma_fixed=0.01), 200, 50, seed=5)
    pred = bart_predict(fit, rng.random((100, 2)))
    assert np.all(np.abs(pred.mean - c) <= abs(c) * 0.01 + 0.05)


def test_input_errors():
    with pytest.raises(InputError):
        bart_fit(np.zeros((3, 1)), np.zeros(3), BartConfig(min_leaf=5), 10, 0, 0)
    with pytest.raises(InputError):
        bart_fit(np.full((10, 1), 2.0), np.zeros(10), BartConfig(), 10, 0, 0)
    with pytest.raises(InputError):
        bart_fit(np.zeros((10, 1)), np.zeros(10), BartConfig(), 10, 10, 0)
    with pytest.raises(InputError):
        BartConfig(pbd=(0.8, 0.5))
    with pytest.raises(InputError):
        BartConfig(m=0)
    with pytest.raises(InputError):
        bart_predict([], np.zeros((1, 1)))


def _constant_forest(value, d=1):
    return Forest.from_trees([RegressionTree.root(CutGrid(d, 3), mu=value)], 0.0)


def _two_leaf_forest(a, b):
    grid = CutGrid(1, 3)
    t = mutate(RegressionTree.root(grid), Grow(0, SplitRule.on_grid(grid, 0, 1))).with_mu([a, b])
    return Forest.from_trees([t], 0.0)


def test_predict_single_and_symmetric_samples():
    X = np.linspace(0, 1, 9)[:, None]
    one = bart_predict([BartSample(_two_leaf_forest(1.0, -2.0), 1.0)], X)
    expected = np.where(X[:, 0] < 0.5, 1.0, -2.0)
    assert np.array_equal(one.mean, expected)
    assert np.array_equal(one.lo, expected) and np.array_equal(one.hi, expected)
    sym = bart_predict([BartSample(_two_leaf_forest(1.5, -0.5), 1.0),
                        BartSample(_two_leaf_forest(-1.5, 0.5), 1.0)], X)
    assert np.all(sym.mean == 0.0)


def _sorted_quantile(values, p):
    s = np.sort(values)
    h = (len(s) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2 ** 32 - 1))
def test_quantiles_match_sort_reference(n_draws, seed):
    draws = np.random.default_rng(seed).normal(size=(n_draws, 4))
    pred = summarize_draws(draws)
    for k in range(4):
        assert math.isclose(pred.lo[k], _sorted_quantile(draws[:, k], 0.025), abs_tol=1e-12)
        assert math.isclose(pred.hi[k], _sorted_quantile(draws[:, k], 0.975), abs_tol=1e-12)
    assert np.all(pred.lo <= pred.hi)


def test_forest_tree_roundtrip():
    rng = np.random.default_rng(18)
    X = rng.random((100, 2))
    fit = bart_fit(X, X.sum(axis=1), BartConfig(m=4, numcut=20), 40, 39, seed=6)
    forest = fit.samples[0].forest
    again = Forest.from_trees(forest.trees, forest.offset)
    assert again.identical(forest)
    from shardbart.tree import evaluate
    manual = forest.offset + np.array([sum(evaluate(t, x) for t in forest.trees) for x in X])
    assert np.allclose(forest.predict(X), manual, atol=1e-12)
