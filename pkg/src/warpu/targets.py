"""Benchmark target densities with known ground truth.

Every target is built from normalized component densities times an
explicit scale, so the true normalizing constant is the scale itself.
Mode centers are exposed for occupancy metrics, and exact i.i.d. samplers
are provided wherever the family admits one (Gaussian mixtures, Student-t
mixtures, skew-t mixtures).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, logsumexp
from scipy.stats import t as student_t

from .density import GaussianMixture, TargetDensity
from .errors import InputError
from .rngs import derive_rng


@dataclass
class BenchmarkTarget:
    """Target plus whatever ground truth the construction provides."""

    target: TargetDensity
    log_c: float | None
    mode_centers: np.ndarray
    sampler: object | None = None           # (rng, n) -> (n, d)
    matched_mixture: GaussianMixture | None = None
    mean: np.ndarray | None = None          # E[theta]
    sum_sq_moment: float | None = None      # E[sum_j theta_j^2]

    @property
    def dim(self):
        return self.target.dim


# -- Gaussian mixtures ---------------------------------------------------------


def _mixture_grad(mix: GaussianMixture):
    def grad(theta):
        theta = np.asarray(theta, dtype=float)
        r = mix.responsibilities(theta)
        g = np.zeros_like(theta)
        for k in range(mix.n_components):
            z = solve_triangular(mix.scales[k], theta - mix.means[k],
                                 lower=True, check_finite=False)
            y = solve_triangular(mix.scales[k].T, z, lower=False, check_finite=False)
            g -= r[k] * y
        return g
    return grad


def target_from_gaussian_mixture(mix: GaussianMixture, scale=1.0, name="") -> BenchmarkTarget:
    log_c = float(np.log(scale))
    tgt = TargetDensity(
        mix.dim,
        log_q=lambda th: mix.log_density(th) + log_c,
        log_q_batch=lambda x: mix.log_density_batch(x) + log_c,
        grad_log_q=_mixture_grad(mix),
        name=name,
    )
    mean = mix.weights @ mix.means
    covs = mix.covariances()
    sum_sq = float(np.sum([
        w * (np.trace(c) + m @ m)
        for w, m, c in zip(mix.weights, mix.means, covs)
    ]))
    return BenchmarkTarget(
        tgt, log_c, mix.means.copy(),
        sampler=lambda rng, n: mix.sample(rng, n),
        matched_mixture=mix, mean=mean, sum_sq_moment=sum_sq,
    )


def _iso_mixture(weights, centers, sds, dim):
    weights = np.asarray(weights, dtype=float)
    centers = np.asarray(centers, dtype=float)
    sds = np.asarray(sds, dtype=float)
    means = np.outer(centers, np.ones(dim)) if centers.ndim == 1 else centers
    scales = np.array([sd * np.eye(dim) for sd in sds])
    return GaussianMixture(weights / weights.sum(), means, scales)


def five_mode_gaussian(dim=4, scale=1.0) -> BenchmarkTarget:
    """Five well-separated isotropic modes on the diagonal, weights 1..5/15."""
    mix = _iso_mixture(
        np.arange(1, 6) / 15.0, [-11.0, 12.0, -8.0, 7.0, -2.0], np.ones(5), dim
    )
    return target_from_gaussian_mixture(mix, scale, name=f"five-mode-{dim}d")


def two_mode_unequal(dim=30, var1=0.8, var2=0.2, scale=1.0) -> BenchmarkTarget:
    """Equal-weight modes at -1 and +1 with unequal isotropic variances."""
    mix = _iso_mixture(
        [0.5, 0.5],
        np.array([-np.ones(dim), np.ones(dim)]),
        np.sqrt([var1, var2]), dim,
    )
    return target_from_gaussian_mixture(mix, scale, name=f"two-mode-{dim}d")


def block_two_mode(dim=30, seed=0, scale=1.0,
                   vars1=(0.25, 0.3, 0.35, 0.4, 0.45),
                   vars2=(1.0, 0.95, 0.9, 0.85, 0.8)) -> BenchmarkTarget:
    """Two modes with blockwise-constant diagonal covariances; the means
    are drawn once from opposite uniform boxes under the given seed."""
    if dim % 5 != 0:
        raise InputError("block target needs a dimension divisible by 5")
    rng = derive_rng(seed)
    mu1 = rng.uniform(-2.5, -1.5, size=dim)
    mu2 = rng.uniform(1.5, 2.5, size=dim)
    block = dim // 5
    d1 = np.repeat(np.sqrt(vars1), block)
    d2 = np.repeat(np.sqrt(vars2), block)
    scales = np.array([np.diag(d1), np.diag(d2)])
    mix = GaussianMixture([0.5, 0.5], np.array([mu1, mu2]), scales)
    return target_from_gaussian_mixture(mix, scale, name=f"block-two-mode-{dim}d")


def trimodal_1d(scale=1.0) -> BenchmarkTarget:
    mix = GaussianMixture(
        [0.35, 0.40, 0.25],
        np.array([[-6.0], [0.0], [7.0]]),
        np.array([1.2, 1.0, 0.9]).reshape(3, 1, 1),
    )
    return target_from_gaussian_mixture(mix, scale, name="trimodal-1d")


def bimodal_gauss(dim=2, sep=3.0, scale=1.0) -> BenchmarkTarget:
    mix = _iso_mixture([0.5, 0.5], [-sep, sep], [1.0, 1.0], dim)
    return target_from_gaussian_mixture(mix, scale, name=f"bimodal-{dim}d")


def three_mode_gauss(dim=5, sep=4.0, scale=1.0) -> BenchmarkTarget:
    mix = _iso_mixture([0.3, 0.4, 0.3], [-sep, 0.0, sep], [1.0, 1.0, 1.0], dim)
    return target_from_gaussian_mixture(mix, scale, name=f"three-mode-{dim}d")


# -- Student-t mixture ---------------------------------------------------------


def t_mixture_1d(locs=(-4.0, 4.0), scales=(1.0, 1.0), dof=4.0,
                 weights=None, scale=1.0) -> BenchmarkTarget:
    """One-dimensional mixture of Student-t components (heavy tails)."""
    locs = np.asarray(locs, dtype=float)
    sc = np.asarray(scales, dtype=float)
    w = np.full(locs.size, 1.0 / locs.size) if weights is None \
        else np.asarray(weights, dtype=float) / np.sum(weights)
    log_c = float(np.log(scale))

    def log_q_batch(x):
        x = np.atleast_2d(x)[:, 0]
        comp = np.stack([
            np.log(w[k]) + student_t.logpdf(x, dof, loc=locs[k], scale=sc[k])
            for k in range(locs.size)
        ], axis=1)
        return logsumexp(comp, axis=1) + log_c

    def sampler(rng, n):
        psi = rng.choice(locs.size, size=n, p=w)
        draws = locs[psi] + sc[psi] * rng.standard_t(dof, size=n)
        return draws[:, None]

    tgt = TargetDensity(1, lambda th: float(log_q_batch(th[None, :])[0]),
                        log_q_batch=log_q_batch, name="t-mix-1d")
    t_var = dof / (dof - 2.0) if dof > 2 else np.inf
    mean = float(w @ locs)
    return BenchmarkTarget(
        tgt, log_c, locs[:, None], sampler=sampler,
        mean=np.array([mean]),
        sum_sq_moment=float(np.sum(w * (sc**2 * t_var + locs**2))),
    )


# -- multivariate skew-t -------------------------------------------------------


class SkewT:
    """Multivariate skew-t distribution (location, SPD scale matrix, skew
    vector, degrees of freedom), with exact density and sampler.

    Density: 2 t_d(x; xi, Omega, nu) * T_{nu+d}(alpha' z * sqrt((nu+d)/(nu+Q)))
    where z is the componentwise-standardized offset and Q its squared
    Mahalanobis norm under the scale-free matrix.  Sampling uses the
    conditioning construction: a (d+1)-variate normal whose first
    coordinate's sign decides a reflection, divided by a scaled chi.
    """

    def __init__(self, xi, omega, alpha, dof):
        self.xi = np.asarray(xi, dtype=float)
        self.omega = np.asarray(omega, dtype=float)
        self.alpha = np.asarray(alpha, dtype=float)
        self.dof = float(dof)
        self.d = self.xi.size
        self.omega_diag = np.sqrt(np.diag(self.omega))
        self.obar = self.omega / np.outer(self.omega_diag, self.omega_diag)
        self.obar_chol = np.linalg.cholesky(self.obar)
        self.log_det_omega = 2.0 * np.log(np.diag(np.linalg.cholesky(self.omega))).sum()
        delta = self.obar @ self.alpha / np.sqrt(1.0 + self.alpha @ self.obar @ self.alpha)
        top = np.concatenate([[1.0], delta])
        bottom = np.hstack([delta[:, None], self.obar])
        self.star_chol = np.linalg.cholesky(np.vstack([top, bottom]))

    def logpdf(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d, nu = self.d, self.dof
        z = (x - self.xi) / self.omega_diag
        sol = solve_triangular(self.obar_chol, z.T, lower=True, check_finite=False)
        q = np.einsum("in,in->n", sol, sol)
        log_t = (
            gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu)
            - 0.5 * d * np.log(nu * np.pi) - 0.5 * self.log_det_omega
            - 0.5 * (nu + d) * np.log1p(q / nu)
        )
        arg = (z @ self.alpha) * np.sqrt((nu + d) / (nu + q))
        return np.log(2.0) + log_t + student_t.logcdf(arg, nu + d)

    def sample(self, rng, n):
        raw = rng.standard_normal((n, self.d + 1)) @ self.star_chol.T
        u0, u = raw[:, 0], raw[:, 1:]
        z = np.where(u0[:, None] > 0, u, -u)
        w = rng.chisquare(self.dof, size=n) / self.dof
        return self.xi + self.omega_diag * z / np.sqrt(w)[:, None]


def _seeded_spd(rng, dim, diag_low=0.6, diag_high=1.8):
    a = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    corr = a @ a.T + np.eye(dim) * dim * 0.5
    d = np.sqrt(np.diag(corr))
    corr = corr / np.outer(d, d)
    sd = rng.uniform(diag_low, diag_high, size=dim)
    return corr * np.outer(sd, sd)


def skewt_mixture(dim=2, n_components=5, dof=7.0, seed=11, scale=1.0,
                  loc_low=-8.0, loc_high=8.0, skew_low=-5.0, skew_high=10.0,
                  weights=None) -> BenchmarkTarget:
    """Mixture of multivariate skew-t components with seeded parameters.

    Locations fall in the given box, scale matrices carry mild random
    correlation, skew vectors are drawn from the given range.  Normalized
    components and simplex weights make the true constant equal ``scale``.
    """
    rng = derive_rng(seed)
    comps = []
    for _ in range(n_components):
        xi = rng.uniform(loc_low, loc_high, size=dim)
        omega = _seeded_spd(rng, dim)
        alpha = rng.uniform(skew_low, skew_high, size=dim)
        comps.append(SkewT(xi, omega, alpha, dof))
    w = np.full(n_components, 1.0 / n_components) if weights is None \
        else np.asarray(weights, dtype=float) / np.sum(weights)
    log_c = float(np.log(scale))

    def log_q_batch(x):
        comp = np.stack([np.log(w[k]) + comps[k].logpdf(x)
                         for k in range(n_components)], axis=1)
        return logsumexp(comp, axis=1) + log_c

    def sampler(rng_, n):
        psi = rng_.choice(n_components, size=n, p=w)
        out = np.empty((n, dim))
        for k in range(n_components):
            idx = np.nonzero(psi == k)[0]
            if idx.size:
                out[idx] = comps[k].sample(rng_, idx.size)
        return out

    tgt = TargetDensity(dim, lambda th: float(log_q_batch(th[None, :])[0]),
                        log_q_batch=log_q_batch, name=f"skewt-{dim}d-{n_components}")
    centers = np.array([c.xi for c in comps])
    bt = BenchmarkTarget(tgt, log_c, centers, sampler=sampler)
    bt.components = comps
    return bt


# -- registry ------------------------------------------------------------------


_REGISTRY = {
    "five-mode": five_mode_gaussian,
    "two-mode-unequal": two_mode_unequal,
    "block-two-mode": block_two_mode,
    "trimodal-1d": trimodal_1d,
    "bimodal-gauss": bimodal_gauss,
    "three-mode-gauss": three_mode_gauss,
    "t-mix-1d": t_mixture_1d,
    "skewt-mix": skewt_mixture,
}


def target_names():
    return sorted(_REGISTRY)


def make_target(spec) -> BenchmarkTarget:
    """Build a named benchmark target from a {"name": ..., params} mapping."""
    if isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in _REGISTRY:
        raise InputError(
            f"unknown target {name!r}; known: {', '.join(target_names())}"
        )
    try:
        return _REGISTRY[name](**spec)
    except TypeError as exc:
        raise InputError(f"bad parameters for target {name!r}: {exc}") from exc
