"""Density primitives: targets, Gaussian mixtures, and the stochastic
standardizing transport.

The central objects are an unnormalized target density ``q`` (wrapped in
:class:`TargetDensity`, which counts evaluations) and a Gaussian mixture
approximation to it (:class:`GaussianMixture`).  The mixture drives a pair
of stochastic affine maps:

* the forward map standardizes a point using a mixture component drawn
  from the component responsibilities at that point, and
* the inverse map rebuilds a point from a standardized one using a
  component index drawn from the back-map selection distribution
  (:func:`inverse_index_distribution`).

Applying forward then inverse leaves the law of a target draw unchanged
while swapping probability mass between modes; the mass-swap bookkeeping
is exposed by :func:`mass_transport_decomposition`.

All mixture and index arithmetic is carried out in log space with
log-sum-exp reductions; benchmark targets span >150 log-units.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import DegenerateStateError, InputError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))


def std_normal_logpdf(x: np.ndarray) -> np.ndarray | float:
    """Log density of the d-variate standard normal, vectorized over rows."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return -0.5 * x.size * LOG_2PI - 0.5 * float(x @ x)
    return -0.5 * x.shape[1] * LOG_2PI - 0.5 * np.einsum("ni,ni->n", x, x)


def check_simplex(p: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Validate that ``p`` is a probability vector (entries >= 0, sum 1)."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise InputError("simplex vector must be one-dimensional")
    if np.any(p < -tol) or not np.isfinite(p).all():
        raise InputError("simplex vector has negative or non-finite entries")
    if abs(p.sum() - 1.0) > tol:
        raise InputError(f"simplex vector sums to {p.sum():.17g}, not 1")
    return p


class TargetDensity:
    """Unnormalized target density with an instrumented evaluation counter.

    Parameters
    ----------
    dim : int
        Dimension of the support.
    log_q : callable
        Maps a length-``dim`` vector to a float; ``-inf`` marks points
        outside the support, NaN is never legal for finite input.
    log_q_batch : callable, optional
        Vectorized form mapping an ``(n, dim)`` array to ``(n,)``.  When
        absent, batches fall back to a Python loop over ``log_q``.
    grad_log_q : callable, optional
        Gradient of ``log_q``; required by Hamiltonian kernels.
    name : str, optional

    The evaluation counter increases by exactly one per evaluated point
    (a batch of n points adds n) and is guarded by a lock so replicate
    workers can share one instance.
    """

    def __init__(self, dim, log_q, log_q_batch=None, grad_log_q=None, name=""):
        if dim < 1:
            raise InputError("dim must be a positive integer")
        self.dim = int(dim)
        self._log_q = log_q
        self._log_q_batch = log_q_batch
        self._grad_log_q = grad_log_q
        self.name = name
        self._lock = threading.Lock()
        self._eval_count = 0

    @property
    def eval_count(self) -> int:
        return self._eval_count

    def _charge(self, n: int) -> None:
        with self._lock:
            self._eval_count += int(n)

    def log_q(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise InputError(f"expected shape ({self.dim},), got {theta.shape}")
        self._charge(1)
        value = float(self._log_q(theta))
        if np.isnan(value):
            raise NumericError("log_q returned NaN for finite input")
        return value

    def log_q_batch(self, thetas) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[1] != self.dim:
            raise InputError(f"expected ({thetas.shape[0]}, {self.dim}), got {thetas.shape}")
        self._charge(thetas.shape[0])
        if self._log_q_batch is not None:
            values = np.asarray(self._log_q_batch(thetas), dtype=float)
        else:
            values = np.array([float(self._log_q(t)) for t in thetas])
        if np.isnan(values).any():
            raise NumericError("log_q returned NaN for finite input")
        return values

    @property
    def has_gradient(self) -> bool:
        return self._grad_log_q is not None

    def grad_log_q(self, theta) -> np.ndarray:
        if self._grad_log_q is None:
            raise InputError(f"target {self.name!r} provides no gradient")
        return np.asarray(self._grad_log_q(np.asarray(theta, dtype=float)), dtype=float)


@dataclass
class GaussianMixture:
    """Gaussian mixture with lower-triangular scale factors.

    ``scales[k]`` is the Cholesky factor S_k of the k-th covariance
    (Sigma_k = S_k S_k^T), stored with strictly positive diagonal so that
    log-determinants reduce to sums of log-diagonals and standardization
    is a triangular solve; no inverse matrices are stored.
    """

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.scales = np.asarray(self.scales, dtype=float)
        if self.scales.ndim == 2:  # 1-d convenience: K scalar scales
            self.scales = self.scales.reshape(self.scales.shape[0], 1, 1)
        k, d = self.means.shape
        if self.weights.shape != (k,):
            raise InputError("weights and means disagree on component count")
        if self.scales.shape != (k, d, d):
            raise InputError(f"scales must have shape ({k}, {d}, {d})")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise InputError("weights must be nonnegative and sum to 1 within 1e-12")
        for s in self.scales:
            if np.any(np.triu(s, 1) != 0.0):
                raise InputError("scale factors must be lower triangular")
        diags = np.diagonal(self.scales, axis1=1, axis2=2)
        if np.any(diags <= 0):
            raise NumericError("scale factors need strictly positive diagonals")
        self._log_dets = np.sum(np.log(diags), axis=1)
        self._log_weights = np.log(self.weights + np.finfo(float).tiny)

    # -- basic descriptors -------------------------------------------------

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def log_det_scales(self) -> np.ndarray:
        """log |S_k| for every component (sum of log-diagonals)."""
        return self._log_dets

    def covariances(self) -> np.ndarray:
        return np.einsum("kij,klj->kil", self.scales, self.scales)

    # -- densities ---------------------------------------------------------

    def component_logpdf(self, thetas) -> np.ndarray:
        """Per-component normal log densities, shape (n, K); weights excluded."""
        x = np.atleast_2d(np.asarray(thetas, dtype=float))
        if x.shape[1] != self.dim:
            raise InputError(f"points have dimension {x.shape[1]}, mixture has {self.dim}")
        n = x.shape[0]
        out = np.empty((n, self.n_components))
        for k in range(self.n_components):
            z = solve_triangular(
                self.scales[k], (x - self.means[k]).T, lower=True, check_finite=False
            )
            out[:, k] = (
                -0.5 * self.dim * LOG_2PI
                - self._log_dets[k]
                - 0.5 * np.einsum("in,in->n", z, z)
            )
        return out

    def log_density(self, theta) -> float:
        return float(self.log_density_batch(np.atleast_2d(theta))[0])

    def log_density_batch(self, thetas) -> np.ndarray:
        comp = self.component_logpdf(thetas)
        return logsumexp(comp + self._log_weights, axis=1)

    def responsibilities(self, theta) -> np.ndarray:
        """Posterior component probabilities at ``theta`` (a simplex vector)."""
        lw = self.component_logpdf(np.atleast_2d(theta))[0] + self._log_weights
        lw -= logsumexp(lw)
        p = np.exp(lw)
        return p / p.sum()

    def responsibilities_batch(self, thetas) -> np.ndarray:
        lw = self.component_logpdf(thetas) + self._log_weights
        lw -= logsumexp(lw, axis=1, keepdims=True)
        p = np.exp(lw)
        return p / p.sum(axis=1, keepdims=True)

    # -- sampling ----------------------------------------------------------

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        psi = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty_like(z)
        for k in range(self.n_components):
            idx = np.nonzero(psi == k)[0]
            if idx.size:
                out[idx] = z[idx] @ self.scales[k].T + self.means[k]
        return out

    # -- stochastic standardization and its inverse --------------------------

    def forward_warp(self, theta, psi: int) -> np.ndarray:
        """Standardize ``theta`` through component ``psi`` (1-based index).

        Solves the triangular system S_psi x = theta - mu_psi.
        """
        k = self._index(psi)
        theta = np.asarray(theta, dtype=float)
        return solve_triangular(
            self.scales[k], theta - self.means[k], lower=True, check_finite=False
        )

    def inverse_warp(self, theta_star, psi: int) -> np.ndarray:
        """Affine back-map S_psi theta* + mu_psi (1-based index)."""
        k = self._index(psi)
        return self.scales[k] @ np.asarray(theta_star, dtype=float) + self.means[k]

    def forward_warp_batch(self, thetas, psi: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(thetas, dtype=float))
        psi = np.asarray(psi, dtype=int)
        out = np.empty_like(x)
        for k in range(self.n_components):
            idx = np.nonzero(psi == k + 1)[0]
            if idx.size:
                out[idx] = solve_triangular(
                    self.scales[k], (x[idx] - self.means[k]).T,
                    lower=True, check_finite=False,
                ).T
        return out

    def inverse_warp_batch(self, theta_stars, psi: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(theta_stars, dtype=float))
        psi = np.asarray(psi, dtype=int)
        out = np.empty_like(x)
        for k in range(self.n_components):
            idx = np.nonzero(psi == k + 1)[0]
            if idx.size:
                out[idx] = x[idx] @ self.scales[k].T + self.means[k]
        return out

    def back_maps(self, theta_star) -> np.ndarray:
        """All K back-mapped images S_k theta* + mu_k, shape (K, d)."""
        theta_star = np.asarray(theta_star, dtype=float)
        return np.einsum("kij,j->ki", self.scales, theta_star) + self.means

    def _index(self, psi: int) -> int:
        if not 1 <= psi <= self.n_components:
            raise InputError(f"component index {psi} outside 1..{self.n_components}")
        return psi - 1

    # -- constraint checks (see fit.FitConstraints) --------------------------

    def satisfies(self, constraints) -> bool:
        dets = np.exp(self._log_dets)
        norms = np.linalg.norm(self.means, axis=1)
        return bool(
            self.n_components < constraints.k_max
            and np.all(dets >= constraints.det_min * (1 - 1e-12))
            and np.all(dets <= constraints.det_max * (1 + 1e-12))
            and np.all(norms <= constraints.mean_norm_max * (1 + 1e-12))
        )


def draw_forward_index(mix: GaussianMixture, theta, rng: np.random.Generator) -> int:
    """Draw the standardizing component index from the responsibilities."""
    return int(rng.choice(mix.n_components, p=mix.responsibilities(theta))) + 1


def draw_forward_index_batch(mix, thetas, rng) -> np.ndarray:
    probs = mix.responsibilities_batch(thetas)
    u = rng.random(probs.shape[0])
    return (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1) + 1


@dataclass
class InverseIndexResult:
    """Back-map selection distribution at a standardized point, plus the
    quantities computed on the way that downstream code must reuse rather
    than re-evaluate: the K back-mapped states and the target log density
    at each of them (exactly K target evaluations per call).
    """

    probs: np.ndarray        # (K,) selection probabilities, on the simplex
    log_q: np.ndarray        # (K,) target log density at each back-map
    states: np.ndarray      # (K, d) back-mapped states H_psi(theta*)
    log_unnorm: np.ndarray  # (K,) unnormalized log selection weights
    log_mix: np.ndarray = field(default=None)  # (K,) mixture log density at states

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.probs.size, p=self.probs)) + 1


def inverse_index_distribution(
    mix: GaussianMixture, target: TargetDensity, theta_star
) -> InverseIndexResult:
    """Selection distribution over back-maps at a standardized point.

    The selection weight of component psi is the responsibility of psi at
    its own back-mapped image, times the target density there, times the
    affine volume factor |S_psi|.  Expanding the responsibility shows the
    weight reduces to  w_psi * q(H_psi(theta*)) / mix(H_psi(theta*)),
    which is what is computed here (in log space; the common standard
    normal factor cancels in the normalization).

    Raises
    ------
    DegenerateStateError
        If every back-mapped image falls outside the support of ``q``.
    """
    states = mix.back_maps(theta_star)
    log_q = target.log_q_batch(states)
    log_mix = mix.log_density_batch(states)
    log_unnorm = mix._log_weights + log_q - log_mix
    if not np.any(np.isfinite(log_unnorm)):
        raise DegenerateStateError(
            "all back-mapped images lie outside the target support"
        )
    shifted = log_unnorm - np.max(log_unnorm[np.isfinite(log_unnorm)])
    p = np.exp(shifted)
    p[~np.isfinite(shifted)] = 0.0
    p /= p.sum()
    return InverseIndexResult(p, log_q, states, log_unnorm, log_mix)


def warped_log_density(
    mix: GaussianMixture,
    target: TargetDensity,
    theta_star,
    logq_cache: np.ndarray | None = None,
) -> float:
    """Log of the standardized (transported) unnormalized density at a point.

    Costs K target evaluations unless ``logq_cache`` supplies the target
    log density at the K back-maps (e.g. from a sampler's cached inverse
    index computation).  Out-of-support back-maps contribute nothing.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    states = mix.back_maps(theta_star)
    log_q = np.asarray(logq_cache, dtype=float) if logq_cache is not None \
        else target.log_q_batch(states)
    log_mix = mix.log_density_batch(states)
    terms = mix._log_weights + log_q - log_mix
    return float(std_normal_logpdf(theta_star) + logsumexp(terms))


def warped_log_density_batch(
    mix: GaussianMixture,
    target: TargetDensity,
    theta_stars,
    logq_cache: np.ndarray | None = None,
) -> np.ndarray:
    """Vectorized form of :func:`warped_log_density` over (n, d) points.

    ``logq_cache`` has shape (n, K) when given; otherwise K batched target
    calls of n points each are made (K*n evaluations).
    """
    x = np.atleast_2d(np.asarray(theta_stars, dtype=float))
    n = x.shape[0]
    k_n = mix.n_components
    terms = np.empty((n, k_n))
    for k in range(k_n):
        back = x @ mix.scales[k].T + mix.means[k]
        lq = logq_cache[:, k] if logq_cache is not None else target.log_q_batch(back)
        terms[:, k] = mix._log_weights[k] + lq - mix.log_density_batch(back)
    return std_normal_logpdf(x) + logsumexp(terms, axis=1)


def component_warped_log_density(
    mix: GaussianMixture, target: TargetDensity, theta_star, k: int
) -> float:
    """Log of the k-th component's transported density (1-based k).

    One target evaluation; the mixture weight is not included, so the
    weighted sum over components recovers the full transported density.
    """
    i = mix._index(k)
    theta_star = np.asarray(theta_star, dtype=float)
    back = mix.scales[i] @ theta_star + mix.means[i]
    lq = target.log_q(back)
    return float(std_normal_logpdf(theta_star) + lq - mix.log_density(back))


def component_warped_log_density_batch(
    mix, target, theta_stars, k: int, logq: np.ndarray | None = None
) -> np.ndarray:
    i = mix._index(k)
    x = np.atleast_2d(np.asarray(theta_stars, dtype=float))
    back = x @ mix.scales[i].T + mix.means[i]
    if logq is None:
        logq = target.log_q_batch(back)
    return std_normal_logpdf(x) + logq - mix.log_density_batch(back)


def transport_step(
    mix: GaussianMixture, target: TargetDensity, theta, rng: np.random.Generator
):
    """One full stochastic transport: standardize with a responsibility-drawn
    index, then back-map with an index drawn from the selection distribution.

    Returns (theta_prime, psi, psi_prime, inverse_result).  Distribution
    preserving for theta ~ target regardless of mixture quality.
    """
    psi = draw_forward_index(mix, theta, rng)
    theta_star = mix.forward_warp(theta, psi)
    nu = inverse_index_distribution(mix, target, theta_star)
    psi_prime = nu.draw(rng)
    return nu.states[psi_prime - 1], psi, psi_prime, nu


def transport_batch(mix, target, thetas, rng):
    """Vectorized transport of many independent draws (for law checks).

    Consumes K target evaluations per point.
    """
    x = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = x.shape[0]
    psi = draw_forward_index_batch(mix, x, rng)
    stars = mix.forward_warp_batch(x, psi)
    k_n = mix.n_components
    log_unnorm = np.empty((n, k_n))
    for k in range(k_n):
        back = stars @ mix.scales[k].T + mix.means[k]
        log_unnorm[:, k] = (
            mix._log_weights[k] + target.log_q_batch(back) - mix.log_density_batch(back)
        )
    log_norm = logsumexp(log_unnorm, axis=1)
    if np.any(~np.isfinite(log_norm)):
        raise DegenerateStateError("degenerate inverse-index weights in batch")
    probs = np.exp(log_unnorm - log_norm[:, None])
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(n)
    psi_prime = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1) + 1
    out = mix.inverse_warp_batch(stars, psi_prime)
    return out, psi, psi_prime


def mass_transport_decomposition(
    mix: GaussianMixture, target: TargetDensity, theta
) -> np.ndarray:
    """K x K matrix of mass transported through each (destination, source)
    transform pair at ``theta``, computed with the unnormalized target.

    Entry (psi_prime, psi) is the density contribution arriving at
    ``theta`` via standardizing with psi_prime and back-mapping with psi's
    pre-image; all entries sum to q(theta).  Column sums give the amount
    of density redistributed from each source component.
    """
    theta = np.asarray(theta, dtype=float)
    k_n = mix.n_components
    out = np.zeros((k_n, k_n))
    for j in range(k_n):  # j = psi_prime - 1
        u = mix.forward_warp(theta, j + 1)
        try:
            nu = inverse_index_distribution(mix, target, u)
        except DegenerateStateError:
            continue
        # responsibilities of each psi at its own back-mapped image
        resp = mix.responsibilities_batch(nu.states)
        diag_resp = np.diagonal(resp)
        log_entries = (
            nu.log_q
            + mix._log_dets
            - mix._log_dets[j]
            + np.log(np.maximum(diag_resp, np.finfo(float).tiny))
            + np.log(max(nu.probs[j], 0.0) + np.finfo(float).tiny)
        )
        row = np.exp(log_entries)
        row[~np.isfinite(nu.log_q)] = 0.0
        if nu.probs[j] == 0.0:
            row[:] = 0.0
        out[j, :] = row
    return out
