"""Synthetic test functions, metrics and experiment drivers."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from . import streams
from .bart import BartConfig, bart_fit, bart_predict
from .errors import InputError
from .sharding import SbtConfig, sbt_fit, sbt_predict


def _unit_points(x, min_dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < min_dim:
        raise InputError(f"{name} needs at least {min_dim} dimensions, got {x.shape[-1]}")
    if np.any(x < 0) or np.any(x > 1):
        raise InputError(f"{name} is defined on the unit cube")
    return x


def branin(x) -> np.ndarray | float:
    """Branin function after mapping [0,1]^2 onto [-5, 10] x [0, 15]; extra dims inert."""
    x = _unit_points(x, 2, "branin")
    x1 = 15.0 * x[..., 0] - 5.0
    x2 = 15.0 * x[..., 1]
    b, c, r, s, t = 5.1 / (4 * np.pi ** 2), 5.0 / np.pi, 6.0, 10.0, 1.0 / (8 * np.pi)
    out = (x2 - b * x1 ** 2 + c * x1 - r) ** 2 + s * (1 - t) * np.cos(x1) + s
    return float(out) if np.ndim(out) == 0 else out


def friedman(x) -> np.ndarray | float:
    """Friedman's first test function; dimensions beyond the fifth are inert."""
    x = _unit_points(x, 5, "friedman")
    out = (10 * np.sin(np.pi * x[..., 0] * x[..., 1]) + 20 * (x[..., 2] - 0.5) ** 2
           + 10 * x[..., 3] + 5 * x[..., 4])
    return float(out) if np.ndim(out) == 0 else out


def step(x) -> np.ndarray | float:
    x = _unit_points(x, 1, "step")
    out = (x[..., 0] > 0.5).astype(float)
    return float(out) if np.ndim(out) == 0 else out


FUNCTIONS = {"branin": (branin, 2), "friedman": (friedman, 5), "step": (step, 1),
             "constant": (None, 1)}


def rmse(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(truths, dtype=float).ravel()
    if len(p) != len(t) or len(p) == 0:
        raise InputError(f"need equal nonzero lengths, got {len(p)} and {len(t)}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def coverage95(intervals, truths) -> float:
    """Fraction of truths inside the closed intervals ``[lo, hi]``."""
    iv = np.asarray(intervals, dtype=float)
    t = np.asarray(truths, dtype=float).ravel()
    if iv.ndim != 2 or iv.shape[1] != 2 or len(iv) != len(t) or len(t) == 0:
        raise InputError("intervals must be an (n, 2) array matching the truths")
    if np.any(iv[:, 0] > iv[:, 1]) or np.isnan(iv).any():
        raise InputError("malformed interval with lo > hi")
    return float(np.mean((iv[:, 0] <= t) & (t <= iv[:, 1])))


VARIANTS = {
    "A": ("bart", 0.25, None),
    "B": ("bart", 0.50, None),
    "C": ("bart", 1.00, None),
    "D": ("sbt", 1.00, 0),
    "E": ("sbt", 1.00, 1),
    "F": ("sbt", 1.00, 2),
}


@dataclass(frozen=True)
class ExperimentSpec:
    """One synthetic comparison.

    Variants A-C fit plain ensembles to 25%, 50% and 100% of the training
    data; D-F fit the sharded model with shardepth 0, 1 and 2.
    """

    function: str = "branin"
    n: int = 1000
    n_test: int = 1000
    d: int = 2
    noise_sd: float = 0.0
    m: int = 10
    shardepths: tuple[int, ...] = (0, 1, 2)
    replicates: int = 1
    seed: int = 0
    nmcmc: int = 500
    burn: int = 100
    tc: int = 1
    numcut: int = 100
    constant_value: float = 1.0
    variants: tuple[str, ...] = ("A", "B", "C", "D", "E", "F")
    n_draws: int = 1

    def __post_init__(self):
        if self.function not in FUNCTIONS:
            raise InputError(f"unknown function {self.function!r}")
        need = FUNCTIONS[self.function][1]
        if self.d < need:
            raise InputError(f"{self.function} needs d >= {need}, got {self.d}")
        if self.n_test < 1 or self.n < 1 or self.replicates < 1:
            raise InputError("n, n_test and replicates must be >= 1")
        for v in self.variants:
            if v not in VARIANTS:
                raise InputError(f"unknown variant {v!r}")

    def truth(self, X) -> np.ndarray:
        if self.function == "constant":
            return np.full(len(X), float(self.constant_value))
        return np.asarray(FUNCTIONS[self.function][0](X), dtype=float)

    def variant_list(self) -> list[tuple[str, str, float, int | None]]:
        out = []
        for label in self.variants:
            kind, frac, depth = VARIANTS[label]
            if kind == "sbt" and depth not in self.shardepths:
                continue
            out.append((label, kind, frac, depth))
        return out


@dataclass(frozen=True)
class MetricsReport:
    variant: str
    replicate: int
    n: int
    d: int
    m: int
    shardepth: int | None
    rmse: float
    coverage95: float
    seconds_per_iter: float


def make_data(spec: ExperimentSpec, replicate: int = 0):
    """Training set (uniform design plus noise) and noise-free LHS test set."""
    rng = streams.stream(spec.seed, streams.DATA, 0, replicate)
    X = rng.random((spec.n, spec.d))
    y = spec.truth(X) + spec.noise_sd * rng.standard_normal(spec.n)
    sampler = qmc.LatinHypercube(d=spec.d, seed=streams.stream(spec.seed, streams.DATA, 1, replicate))
    X_test = sampler.random(spec.n_test)
    return X, y, X_test, spec.truth(X_test)


def replicate_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(streams.DATA, 2, replicate))
               .generate_state(1)[0])


def run_experiment(spec: ExperimentSpec) -> list[MetricsReport]:
    bart_cfg = BartConfig(m=spec.m, numcut=spec.numcut)
    reports = []
    for rep in range(spec.replicates):
        X, y, X_test, truth = make_data(spec, rep)
        mcmc_seed = replicate_seed(spec.seed, rep)
        for label, kind, frac, depth in spec.variant_list():
            if kind == "bart":
                n_sub = max(int(round(frac * spec.n)), bart_cfg.min_leaf)
                if n_sub < spec.n:
                    rows = np.sort(streams.stream(spec.seed, streams.SUBSAMPLE, rep, label.encode()[0])
                                   .choice(spec.n, n_sub, replace=False))
                else:
                    rows = np.arange(spec.n)
                fit = bart_fit(X[rows], y[rows], bart_cfg, spec.nmcmc, spec.burn, mcmc_seed)
                pred = bart_predict(fit, X_test)
                secs = float(np.median(fit.seconds))
                n_used = len(rows)
            else:
                cfg = SbtConfig(bart=bart_cfg, shardepth=depth, tc=spec.tc)
                fit = sbt_fit(X, y, cfg, spec.nmcmc, spec.burn, mcmc_seed)
                pred = sbt_predict(fit, X_test, seed=mcmc_seed, n_draws=spec.n_draws)
                secs = float(np.median([d["seconds"] for d in fit.diagnostics]))
                n_used = spec.n
            reports.append(MetricsReport(label, rep, n_used, spec.d, spec.m, depth,
                                         rmse(pred.mean, truth),
                                         coverage95(pred.intervals, truth), secs))
    return reports


def write_reports_csv(reports: Sequence[MetricsReport], path) -> None:
    names = [f.name for f in fields(MetricsReport)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for r in reports:
            row = asdict(r)
            row["shardepth"] = "" if r.shardepth is None else r.shardepth
            writer.writerow(row)


def timing_study(n: int = 5000, m: int = 10, shardepths: Sequence[int] = (0, 1, 2),
                 runs: int = 5, tc: int = 4, nmcmc: int = 200, warmup: int = 50,
                 seed: int = 0, function: str = "friedman", d: int = 5) -> dict[int, list[float]]:
    """Median seconds per iteration, after ``warmup`` iterations, per run and shardepth."""
    spec = ExperimentSpec(function=function, n=n, d=d, m=m, seed=seed, n_test=1)
    X, y, _, _ = make_data(spec)
    out: dict[int, list[float]] = {k: [] for k in shardepths}
    for run in range(runs):
        for depth in shardepths:
            cfg = SbtConfig(bart=BartConfig(m=m), shardepth=depth, tc=tc)
            fit = sbt_fit(X, y, cfg, nmcmc, nmcmc - 1, replicate_seed(seed, run))
            secs = [row["seconds"] for row in fit.diagnostics[warmup:]]
            out[depth].append(float(np.median(secs)))
    return out


def summarize(reports: Sequence[MetricsReport]) -> dict[str, dict[str, float]]:
    """Mean metrics per variant."""
    out = {}
    for label in sorted({r.variant for r in reports}):
        rows = [r for r in reports if r.variant == label]
        out[label] = {"rmse": float(np.mean([r.rmse for r in rows])),
                      "coverage95": float(np.mean([r.coverage95 for r in rows])),
                      "seconds_per_iter": float(np.median([r.seconds_per_iter for r in rows]))}
    return out


def mean_rmse_ratio(reports: Sequence[MetricsReport], numerator: str, denominator: str) -> float:
    s = summarize(reports)
    return s[numerator]["rmse"] / s[denominator]["rmse"]

