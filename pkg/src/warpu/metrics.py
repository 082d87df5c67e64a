"""Benchmark metrics: sample-distance measures, effective sample size,
mode occupancy, and the precision-per-cost summary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import wasserstein_distance

from .errors import InputError


def wasserstein_1d(samples_a, samples_b) -> float:
    """Exact first Wasserstein distance between two 1-d empirical measures
    (order-statistics form, interpolating when the sizes differ)."""
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise InputError("empty sample set")
    return float(wasserstein_distance(a, b))


def wasserstein_2d(samples_a, samples_b, *, max_points=2000, rng=None, p=2):
    """Exact OT distance between two small 2-d point clouds.

    Subsamples to ``max_points`` per side, then solves the discrete
    transport problem exactly with the package's transportation simplex.
    Returns the p-th root of the optimal mean p-cost.
    """
    from .coupling import transportation_simplex

    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    rng = rng or np.random.default_rng(0)
    if a.shape[0] > max_points:
        a = a[rng.choice(a.shape[0], size=max_points, replace=False)]
    if b.shape[0] > max_points:
        b = b[rng.choice(b.shape[0], size=max_points, replace=False)]
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    if p == 1:
        cost = np.sqrt(cost)
    plan = transportation_simplex(
        np.full(a.shape[0], 1.0 / a.shape[0]),
        np.full(b.shape[0], 1.0 / b.shape[0]),
        cost,
    )
    return float(plan.objective ** (1.0 / p))


def ess_autocorrelation(trace) -> tuple[float, np.ndarray]:
    """Effective sample size with the initial-positive-monotone-sequence
    truncation of the autocorrelation function.

    Consecutive-lag pair sums of the ACF are accumulated while they stay
    positive, capped to be nonincreasing; ESS = n / (1 + 2 sum rho_k) over
    the retained window.  Returns (ess, acf-with-retained-lags).  A
    constant trace is degenerate and reports an ESS of 1.
    """
    x = np.asarray(trace, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise InputError("need at least 10 points for an autocorrelation ESS")
    x = x - x.mean()
    if np.all(x == 0):
        return 1.0, np.array([1.0])
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conjugate(f), m)[:n].real / n
    rho = acov / acov[0]

    limit = (n - 1) // 2
    kept = []
    prev = np.inf
    for j in range(limit):
        g = rho[2 * j] + rho[2 * j + 1]
        if g <= 0:
            break
        kept.append(min(g, prev))
        prev = kept[-1]
    iact = max(2.0 * float(np.sum(kept)) - 1.0, 1e-12)
    ess = float(np.clip(n / iact, 1.0, n))
    n_lags = max(2 * len(kept) - 1, 1)
    return ess, rho[:n_lags + 1]


def mode_occupancy(samples, centers) -> np.ndarray:
    """Fraction of samples nearest (Euclidean) to each known mode center."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    c = np.atleast_2d(np.asarray(centers, dtype=float))
    d2 = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    return np.bincount(nearest, minlength=c.shape[0]) / x.shape[0]


def rmse(estimates, truth) -> float:
    e = np.asarray(estimates, dtype=float)
    return float(np.sqrt(np.mean((e - truth) ** 2)))


def rmse_se(estimates, truth) -> float:
    """Delta-method standard error of the RMSE across replicates."""
    e = np.asarray(estimates, dtype=float)
    sq = (e - truth) ** 2
    mse = sq.mean()
    if mse == 0:
        return 0.0
    var_mse = sq.var(ddof=1) / sq.size
    return float(0.5 * np.sqrt(var_mse) / np.sqrt(mse))


@dataclass
class Pps:
    """Precision per cost: 1/(RMSE x wall seconds), plus the
    evaluation-normalized variant 1/(RMSE x target evaluations)."""

    per_second: float
    per_eval: float


def pps(rmse_value, target_evals, wall_ms) -> Pps:
    if rmse_value <= 0 or target_evals <= 0 or wall_ms <= 0:
        raise InputError("precision-per-cost needs positive inputs")
    return Pps(
        per_second=1.0 / (rmse_value * wall_ms / 1e3),
        per_eval=1.0 / (rmse_value * target_evals),
    )


def log_survival_slope(taus, *, min_count=5) -> float:
    """Slope of log P(tau > t) against t over the observed range.

    Negative slopes indicate geometric meeting-time tails.
    """
    taus = np.asarray(taus, dtype=float)
    ts = np.arange(1, int(taus.max()))
    surv = np.array([(taus > t).mean() for t in ts])
    keep = surv * taus.size >= min_count
    ts, surv = ts[keep], surv[keep]
    if ts.size < 3:
        raise InputError("not enough distinct meeting times for a slope")
    slope = np.polyfit(ts, np.log(surv), 1)[0]
    return float(slope)
