"""Gaussian-mixture fitting under determinant/mean-norm constraints.

The fitter is plain EM with full covariances, run in log space, with two
implementation choices that matter for reproducible multi-stage sampling:
k-means++ style seeding under an explicit seed (or a warm start from the
previous stage's mixture), and a small diagonal regularizer added to every
M-step covariance so factors stay invertible before the constraint clamp.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .density import GaussianMixture
from .errors import InputError, NumericError
from .rngs import derive_rng


@dataclass(frozen=True)
class FitConstraints:
    """Bounds the fitted mixture must respect.

    det_min/det_max bound the determinant of each Cholesky scale factor,
    mean_norm_max bounds the Euclidean norm of each mean, k_max bounds the
    component count, and min_component_count is the floor on per-component
    sample assignment used by stratified estimators.
    """

    k_max: int = 64
    det_min: float = 1e-6
    det_max: float = 1e9
    mean_norm_max: float = 1e4
    min_component_count: int = 2

    def __post_init__(self):
        if not self.det_min < self.det_max:
            raise InputError("det_min must be below det_max")
        if self.k_max <= 1:
            raise InputError("k_max must exceed 1")


DEFAULT_CONSTRAINTS = FitConstraints()


def update_schedule(s: int) -> float:
    """Refit probability at stage s: exp(1 - s**(1/8)).

    Strictly decreasing in s, equal to 1 at s=1, and tending to zero.
    """
    if s < 1:
        raise InputError("stage index starts at 1")
    return float(np.exp(1.0 - float(s) ** 0.125))


@dataclass
class EMFit:
    mixture: GaussianMixture
    log_likelihoods: list
    responsibilities: np.ndarray
    n_iter: int
    converged: bool


def em_fit(samples, k, constraints=None, *, seed=0, warm_start=None,
           tol=1e-8, max_iter=500, reg=1e-6) -> GaussianMixture:
    """Fit a k-component Gaussian mixture by EM; returns the mixture only."""
    return em_fit_full(samples, k, constraints, seed=seed, warm_start=warm_start,
                       tol=tol, max_iter=max_iter, reg=reg).mixture


def em_fit_full(samples, k, constraints=None, *, seed=0, warm_start=None,
                tol=1e-8, max_iter=500, reg=1e-6) -> EMFit:
    """EM with the full fit record (likelihood path, final responsibilities).

    The observed-data log likelihood is nondecreasing along iterations (up
    to the covariance regularizer's perturbation); iteration stops when the
    relative improvement drops below ``tol`` or after ``max_iter`` rounds.
    A collapsed component (vanishing responsibility mass) is re-seeded at a
    sample drawn deterministically from the fit's own stream.
    """
    constraints = constraints or DEFAULT_CONSTRAINTS
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    k = int(k)
    if k > constraints.k_max:
        raise InputError(f"k={k} exceeds k_max={constraints.k_max}")
    if n < k * (d + 1):
        raise InputError(f"need at least k*(d+1)={k * (d + 1)} samples, got {n}")

    rng = derive_rng(seed)
    sample_var = np.maximum(x.var(axis=0), 1e-12)
    ridge = np.diag(reg * sample_var)

    if warm_start is not None:
        if warm_start.n_components != k or warm_start.dim != d:
            raise InputError("warm start mixture has incompatible shape")
        weights = warm_start.weights.copy()
        means = warm_start.means.copy()
        covs = warm_start.covariances()
    else:
        means = _kmeanspp_seed(x, k, rng)
        weights = np.full(k, 1.0 / k)
        covs = np.repeat(np.cov(x, rowvar=False).reshape(1, d, d) + ridge, k, axis=0) \
            if d > 1 else np.full((k, 1, 1), x.var() + reg)

    log_liks = []
    log_resp = None
    converged = False
    for it in range(max_iter):
        log_prob = _weighted_log_prob(x, weights, means, covs)
        norm = logsumexp(log_prob, axis=1)
        ll = float(norm.sum())
        log_resp = log_prob - norm[:, None]
        log_liks.append(ll)
        if len(log_liks) > 1:
            prev = log_liks[-2]
            if abs(ll - prev) <= tol * max(abs(prev), 1.0):
                converged = True
                break

        resp = np.exp(log_resp)
        nk = resp.sum(axis=0)
        for j in range(k):
            if nk[j] < 1e-8 * n:  # collapsed component: re-seed
                means[j] = x[rng.integers(n)]
                covs[j] = np.cov(x, rowvar=False).reshape(d, d) if d > 1 \
                    else np.array([[x.var()]])
                nk[j] = 1.0
                resp[:, j] = 1.0 / n
        weights = nk / nk.sum()
        means = (resp.T @ x) / nk[:, None]
        for j in range(k):
            diff = x - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + ridge

    mix = _to_mixture(weights, means, covs)
    mix = enforce_constraints(mix, constraints)
    return EMFit(mix, log_liks, np.exp(log_resp), len(log_liks), converged)


def _kmeanspp_seed(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((x - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def _weighted_log_prob(x, weights, means, covs):
    n, d = x.shape
    k = weights.size
    out = np.empty((n, k))
    for j in range(k):
        try:
            chol = np.linalg.cholesky(covs[j])
        except np.linalg.LinAlgError:
            covs[j] = covs[j] + np.eye(d) * (1e-10 + abs(np.trace(covs[j])) * 1e-10)
            chol = np.linalg.cholesky(covs[j])
        z = np.linalg.solve(chol, (x - means[j]).T)
        out[:, j] = (
            np.log(max(weights[j], np.finfo(float).tiny))
            - 0.5 * d * np.log(2 * np.pi)
            - np.log(np.diag(chol)).sum()
            - 0.5 * np.einsum("in,in->n", z, z)
        )
    return out


def _to_mixture(weights, means, covs):
    scales = np.empty_like(covs)
    for j in range(covs.shape[0]):
        try:
            scales[j] = np.linalg.cholesky(covs[j])
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"component {j} covariance not positive definite") from exc
    return GaussianMixture(weights / weights.sum(), means, scales)


def enforce_constraints(mix: GaussianMixture, constraints: FitConstraints) -> GaussianMixture:
    """Project a mixture onto the constraint set.

    Scale factors with out-of-range determinants are rescaled isotropically
    onto the nearest bound, means are clipped radially, weights renormalized.
    Idempotent: a compliant mixture comes back unchanged.
    """
    d = mix.dim
    scales = mix.scales.copy()
    means = mix.means.copy()
    changed = False
    dets = np.exp(mix.log_det_scales)
    slack = 1e-12  # matches GaussianMixture.satisfies; keeps the clamp idempotent
    for j in range(mix.n_components):
        if dets[j] < constraints.det_min * (1 - slack):
            scales[j] *= (constraints.det_min / dets[j]) ** (1.0 / d)
            changed = True
        elif dets[j] > constraints.det_max * (1 + slack):
            scales[j] *= (constraints.det_max / dets[j]) ** (1.0 / d)
            changed = True
        norm = np.linalg.norm(means[j])
        if norm > constraints.mean_norm_max * (1 + slack):
            means[j] *= constraints.mean_norm_max / norm
            changed = True
    weights = mix.weights / mix.weights.sum()
    if not changed and np.array_equal(weights, mix.weights):
        return mix
    return GaussianMixture(weights, means, scales)


def bic_sweep(samples, k_values, constraints=None, *, seed=0):
    """BIC for each candidate component count; never invoked automatically.

    Returns {k: (bic, mixture)} with BIC = -2 ll + p log n.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    out = {}
    for k in k_values:
        fit = em_fit_full(x, k, constraints, seed=seed)
        n_params = k - 1 + k * d + k * d * (d + 1) // 2
        out[int(k)] = (-2.0 * fit.log_likelihoods[-1] + n_params * np.log(n), fit.mixture)
    return out


# -- serialization ---------------------------------------------------------

def mixture_to_json(mix: GaussianMixture) -> str:
    """Serialize to JSON text; floats keep full round-trip precision."""
    payload = {
        "k": mix.n_components,
        "dim": mix.dim,
        "weights": mix.weights.tolist(),
        "means": mix.means.tolist(),
        "scales": [s.reshape(-1).tolist() for s in mix.scales],  # row-major
    }
    return json.dumps(payload, indent=1)


def mixture_from_json(text: str) -> GaussianMixture:
    payload = json.loads(text)
    k, d = int(payload["k"]), int(payload["dim"])
    scales = np.array(payload["scales"], dtype=float).reshape(k, d, d)
    return GaussianMixture(np.array(payload["weights"]), np.array(payload["means"]), scales)


def save_mixture(mix: GaussianMixture, path) -> None:
    with open(path, "w") as fh:
        fh.write(mixture_to_json(mix) + "\n")


def load_mixture(path) -> GaussianMixture:
    with open(path) as fh:
        return mixture_from_json(fh.read())
