"""MCMC kernels and drivers built around the stochastic transport step.

A transport step wraps any detailed-balance local kernel: the local move
is followed by a standardize/back-map pair whose indices are drawn from
the responsibility and back-map selection distributions.  The local move
costs one target evaluation and the back-map selection exactly K, so a
T-iteration run consumes (K+1)*T evaluations beyond the initial state.

Drivers are deterministic functions of their seed; every trace can be
replayed bit-identically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .density import (
    GaussianMixture,
    TargetDensity,
    draw_forward_index,
    inverse_index_distribution,
)
from .errors import DegenerateStateError, InputError
from .fit import DEFAULT_CONSTRAINTS, em_fit, update_schedule
from .rngs import derive_rng


@dataclass
class ChainState:
    """Mutable state of one chain: position, cached target log density
    (always in sync with the position), stream handle, and counters."""

    theta: np.ndarray
    log_q: float
    rng: np.random.Generator
    stage: int = 0
    n_steps: int = 0
    n_accepted: int = 0
    n_mode_jumps: int = 0
    n_warp_skips: int = 0
    n_grad_failures: int = 0

    @classmethod
    def initialize(cls, target: TargetDensity, theta0, rng, stage=0) -> "ChainState":
        """Evaluate the starting point once and wrap it up (1 evaluation)."""
        theta0 = np.asarray(theta0, dtype=float)
        return cls(theta0.copy(), target.log_q(theta0), rng, stage)


@dataclass
class SamplerTrace:
    """Recorded run of a sampler.

    ``psi``/``psi_prime`` are 1-based transform indices; 0 marks steps
    without a (completed) warp stage.  When ``theta_star``/``nu_log_q``
    are present they carry the standardized points and the cached target
    log densities at all K back-maps, for reuse by estimators.
    """

    samples: np.ndarray
    log_q: np.ndarray
    accepted: np.ndarray
    psi: np.ndarray
    psi_prime: np.ndarray
    evals_per_step: np.ndarray
    target_evals: int
    theta_star: np.ndarray | None = None
    nu_log_q: np.ndarray | None = None
    aux: dict = field(default_factory=dict)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]

    @property
    def acceptance_rate(self):
        return float(self.accepted.mean())

    @property
    def mode_jump_rate(self):
        live = self.psi_prime > 0
        if not live.any():
            return 0.0
        return float((self.psi[live] != self.psi_prime[live]).mean())

    def has_warp_cache(self):
        return self.theta_star is not None and self.nu_log_q is not None

    def to_csv(self, path):
        """Delimited text: step,accepted,psi,psi_prime,theta_1..theta_d."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["step", "accepted", "psi", "psi_prime"]
                + [f"theta_{j + 1}" for j in range(self.dim)]
            )
            for t in range(len(self)):
                writer.writerow(
                    [t + 1, int(self.accepted[t]), int(self.psi[t]), int(self.psi_prime[t])]
                    + [repr(float(v)) for v in self.samples[t]]
                )

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        d = len(head) - 4
        n = len(body)
        samples = np.array([[float(v) for v in r[4:]] for r in body])
        return cls(
            samples=samples,
            log_q=np.full(n, np.nan),
            accepted=np.array([int(r[1]) for r in body], dtype=bool),
            psi=np.array([int(r[2]) for r in body]),
            psi_prime=np.array([int(r[3]) for r in body]),
            evals_per_step=np.zeros(n, dtype=int),
            target_evals=0,
        )


# -- local kernels -----------------------------------------------------------

def rwm_step(state: ChainState, target: TargetDensity, sigma: float) -> bool:
    """Symmetric random-walk Metropolis move; one target evaluation."""
    if sigma <= 0:
        raise InputError("proposal scale must be positive")
    prop = state.theta + sigma * state.rng.standard_normal(state.theta.size)
    log_q_prop = target.log_q(prop)
    if np.log(state.rng.random()) < log_q_prop - state.log_q:
        state.theta = prop
        state.log_q = log_q_prop
        state.n_accepted += 1
        return True
    return False


def leapfrog(grad_log_q, theta, p, step_size, n_steps):
    """Leapfrog integration of (position, momentum); returns the endpoint."""
    theta = theta.copy()
    p = p + 0.5 * step_size * grad_log_q(theta)
    for i in range(n_steps):
        theta = theta + step_size * p
        g = grad_log_q(theta)
        if not np.all(np.isfinite(g)):
            return theta, p, False
        p = p + (step_size if i < n_steps - 1 else 0.5 * step_size) * g
    return theta, p, True


def hmc_step(state: ChainState, target: TargetDensity,
             step_size: float, n_leapfrog: int) -> bool:
    """Hamiltonian move with unit mass matrix; one target evaluation.

    Gradient calls are not charged to the evaluation counter.  Non-finite
    gradients reject the step and bump the diagnostic counter.
    """
    p0 = state.rng.standard_normal(state.theta.size)
    theta1, p1, ok = leapfrog(target.grad_log_q, state.theta, p0, step_size, n_leapfrog)
    if not ok:
        state.n_grad_failures += 1
        return False
    log_q1 = target.log_q(theta1)
    energy_drop = (log_q1 - 0.5 * p1 @ p1) - (state.log_q - 0.5 * p0 @ p0)
    if np.log(state.rng.random()) < energy_drop:
        state.theta = theta1
        state.log_q = log_q1
        state.n_accepted += 1
        return True
    return False


def make_rwm_kernel(sigma):
    def kernel(state, target):
        return rwm_step(state, target, sigma)
    return kernel


def make_hmc_kernel(step_size, n_leapfrog):
    def kernel(state, target):
        return hmc_step(state, target, step_size, n_leapfrog)
    return kernel


# -- transport step and drivers ----------------------------------------------

def annealed_inverse_index(probs: np.ndarray, c: float) -> np.ndarray:
    """Temper a selection simplex by exponent 1/c (c >= 1).

    c == 1 returns the input unchanged (bit-identical downstream draws);
    larger c flattens toward uniform over the support of the input.
    """
    if c < 1:
        raise InputError("annealing constant must be >= 1")
    if c == 1.0:
        return probs
    p = np.asarray(probs, dtype=float)
    out = np.zeros_like(p)
    pos = p > 0
    logs = np.log(p[pos]) / c
    logs -= logs.max()
    out[pos] = np.exp(logs)
    return out / out.sum()


def warpu_step(state: ChainState, target: TargetDensity, mix: GaussianMixture,
               local_kernel, annealing_c: float = 1.0):
    """One sampler iteration: local kernel, then the stochastic transport.

    Returns a record dict (accepted, psi, psi_prime, evals, nu) where nu
    carries the cached back-map states and log densities; downstream users
    must take values from the cache instead of re-evaluating.  If every
    back-map of the standardized point is out of support the warp stage is
    skipped and flagged (psi_prime = 0), leaving the local-kernel state.
    """
    accepted = local_kernel(state, target)
    state.n_steps += 1
    psi = draw_forward_index(mix, state.theta, state.rng)
    theta_star = mix.forward_warp(state.theta, psi)
    try:
        nu = inverse_index_distribution(mix, target, theta_star)
    except DegenerateStateError:
        state.n_warp_skips += 1
        return {"accepted": accepted, "psi": psi, "psi_prime": 0,
                "evals": 1 + mix.n_components, "nu": None, "theta_star": theta_star}
    probs = annealed_inverse_index(nu.probs, annealing_c)
    if annealing_c == 1.0:
        psi_prime = nu.draw(state.rng)
    else:
        psi_prime = int(state.rng.choice(probs.size, p=probs)) + 1
    if psi_prime != psi:
        state.n_mode_jumps += 1
    state.theta = nu.states[psi_prime - 1].copy()
    state.log_q = float(nu.log_q[psi_prime - 1])
    return {"accepted": accepted, "psi": psi, "psi_prime": psi_prime,
            "evals": 1 + mix.n_components, "nu": nu, "theta_star": theta_star}


def run_basic_warpu(target, mix, *, n_steps, sigma=None, theta0=None, seed=None,
                    initial_state=None, local_kernel=None, annealing_c=1.0,
                    record_caches=False) -> SamplerTrace:
    """Drive ``warpu_step`` for ``n_steps`` iterations.

    Either pass a pre-evaluated ``initial_state`` (the run then consumes
    exactly (K+1)*n_steps target evaluations) or ``theta0``+``seed`` (one
    extra evaluation for the starting point).  ``record_caches=True``
    stores the standardized points and back-map log densities so bridge
    estimators can reuse them without new target evaluations.
    """
    if local_kernel is None:
        if sigma is None:
            raise InputError("provide sigma or an explicit local kernel")
        local_kernel = make_rwm_kernel(sigma)
    if initial_state is None:
        if theta0 is None or seed is None:
            raise InputError("provide initial_state or (theta0, seed)")
        initial_state = ChainState.initialize(target, theta0, derive_rng(seed))
    state = initial_state

    n = int(n_steps)
    d = target.dim
    k = mix.n_components
    start_evals = target.eval_count
    samples = np.empty((n, d))
    log_q = np.empty(n)
    accepted = np.zeros(n, dtype=bool)
    psi = np.zeros(n, dtype=int)
    psi_prime = np.zeros(n, dtype=int)
    evals = np.zeros(n, dtype=int)
    theta_star = np.empty((n, d)) if record_caches else None
    nu_log_q = np.full((n, k), -np.inf) if record_caches else None

    for t in range(n):
        rec = warpu_step(state, target, mix, local_kernel, annealing_c)
        samples[t] = state.theta
        log_q[t] = state.log_q
        accepted[t] = rec["accepted"]
        psi[t] = rec["psi"]
        psi_prime[t] = rec["psi_prime"]
        evals[t] = rec["evals"]
        if record_caches:
            theta_star[t] = rec["theta_star"]
            if rec["nu"] is not None:
                nu_log_q[t] = rec["nu"].log_q

    return SamplerTrace(
        samples, log_q, accepted, psi, psi_prime, evals,
        target_evals=target.eval_count - start_evals,
        theta_star=theta_star, nu_log_q=nu_log_q,
        aux={"state": state, "mixture": mix},
    )


@dataclass
class AdaptiveResult:
    initial_samples: np.ndarray
    stage_traces: list
    mixtures: list       # fitted mixture before each stage (len = stages + 1)
    refit_flags: list
    target_evals: int

    @property
    def samples(self):
        if not self.stage_traces:
            return self.initial_samples
        return np.vstack([t.samples for t in self.stage_traces])

    @property
    def final_mixture(self):
        return self.mixtures[-1]

    def stage_samples(self, s):
        """Samples drawn at stage s (0 = the initial over-dispersed draws)."""
        return self.initial_samples if s == 0 else self.stage_traces[s - 1].samples


def _initial_sampler(spec, dim):
    if callable(spec):
        return spec
    kind = spec.get("kind")
    if kind == "uniform":
        low = np.resize(np.asarray(spec["low"], dtype=float), dim)
        high = np.resize(np.asarray(spec["high"], dtype=float), dim)
        return lambda rng, n: rng.uniform(low, high, size=(n, dim))
    if kind == "gaussian":
        mean = np.resize(np.asarray(spec.get("mean", 0.0), dtype=float), dim)
        sd = float(spec.get("sd", 1.0))
        return lambda rng, n: mean + sd * rng.standard_normal((n, dim))
    raise InputError(f"unknown initial density spec: {spec!r}")


def run_adaptive_warpu(
    target, *, n_per_stage, n_stages, k, seed, initial, sigma=None,
    refit_policy="all", constraints=None, theta0=None, local_kernel=None,
    record_caches=False, annealing=None, refit_schedule=update_schedule,
) -> AdaptiveResult:
    """Multi-stage driver: draw over-dispersed starting samples, fit the
    mixture, then alternate sampling stages with increasingly rare refits.

    ``initial`` must specify the over-dispersed starting density explicitly
    (a dict like {"kind": "uniform", "low": -20, "high": 20} or a callable
    (rng, n) -> samples); unbounded targets have no default.  The refit at
    stage s happens with probability exp(1 - s**(1/8)), and refit_policy
    selects among: "all" (refit on all accumulated samples), "all-stop10"
    (same, but never after stage 10), "subsample" (refit on n_per_stage
    samples drawn from the accumulated pool), "subsample-stop10".
    ``annealing`` optionally tempers the back-map selection with a constant
    max(1, c0 * r**s) per stage (pass a dict {"c0": 8, "r": 0.5}).
    ``n_stages=0`` returns only the initial draws.
    """
    if refit_policy not in ("all", "all-stop10", "subsample", "subsample-stop10"):
        raise InputError(f"unknown refit policy {refit_policy!r}")
    constraints = constraints or DEFAULT_CONSTRAINTS
    rng = derive_rng(seed)
    draw_initial = _initial_sampler(initial, target.dim)
    start_evals = target.eval_count

    pool = draw_initial(rng, int(n_per_stage))
    initial_pool = pool.copy()
    if n_stages == 0:
        return AdaptiveResult(pool, [], [], [], target.eval_count - start_evals)

    mix = em_fit(pool, k, constraints, seed=int(rng.integers(2**63)))
    mixtures = [mix]
    traces = []
    refits = []
    if theta0 is None:
        theta0 = pool[0]
    state = ChainState.initialize(target, theta0, rng)

    for s in range(1, int(n_stages) + 1):
        c = 1.0
        if annealing:
            c = max(1.0, annealing.get("c0", 8.0) * annealing.get("r", 0.5) ** s)
        state.stage = s
        trace = run_basic_warpu(
            target, mix, n_steps=n_per_stage, sigma=sigma,
            initial_state=state, local_kernel=local_kernel,
            annealing_c=c, record_caches=record_caches,
        )
        traces.append(trace)
        pool = np.vstack([pool, trace.samples])

        refit = rng.random() < refit_schedule(s)
        if refit_policy.endswith("stop10") and s > 10:
            refit = False
        refits.append(refit)
        if refit:
            if refit_policy.startswith("subsample"):
                idx = rng.choice(pool.shape[0], size=int(n_per_stage), replace=False)
                fit_data = pool[idx]
            else:
                fit_data = pool
            mix = em_fit(fit_data, k, constraints,
                         seed=int(rng.integers(2**63)), warm_start=mix)
        mixtures.append(mix)

    return AdaptiveResult(
        initial_pool, traces, mixtures, refits, target.eval_count - start_evals,
    )


# -- baselines ----------------------------------------------------------------

@dataclass
class PTResult:
    cold_trace: SamplerTrace
    betas: np.ndarray
    swap_rates: np.ndarray
    beta_history: np.ndarray | None = None


def run_parallel_tempering(
    target, *, n_levels, n_steps, sigma, theta0, seed,
    ladder="fixed", beta_min=None, adapt_target=0.234,
) -> PTResult:
    """Random-walk Metropolis within levels plus adjacent-pair swaps.

    Fixed ladders use equally spaced inverse temperatures between
    ``beta_min`` (default 1/n_levels) and 1.  The adaptive ladder runs
    Robbins-Monro on the log spacings of the temperature grid, targeting
    the given swap acceptance rate.  Proposal scales grow with temperature
    as sigma/sqrt(beta).  Returns the cold chain plus swap statistics;
    one batched target evaluation (n_levels points) per iteration.
    """
    if n_levels < 2:
        raise InputError("need at least two temperature levels")
    if ladder not in ("fixed", "adaptive"):
        raise InputError(f"unknown ladder mode {ladder!r}")
    rng = derive_rng(seed)
    d = target.dim
    lo = 1.0 / n_levels if beta_min is None else float(beta_min)
    betas = np.linspace(1.0, lo, n_levels)  # level 0 is the cold chain

    thetas = np.tile(np.asarray(theta0, dtype=float), (n_levels, 1))
    log_q = target.log_q_batch(thetas)
    start_evals = target.eval_count - n_levels  # init evals included below

    n = int(n_steps)
    cold = np.empty((n, d))
    cold_lq = np.empty(n)
    cold_acc = np.zeros(n, dtype=bool)
    swap_attempts = np.zeros(n_levels - 1)
    swap_accepts = np.zeros(n_levels - 1)
    log_gaps = np.log(np.diff(1.0 / betas)) if ladder == "adaptive" else None
    beta_hist = [] if ladder == "adaptive" else None

    for t in range(n):
        step_scale = sigma / np.sqrt(betas)
        props = thetas + step_scale[:, None] * rng.standard_normal((n_levels, d))
        lq_prop = target.log_q_batch(props)
        accept = np.log(rng.random(n_levels)) < betas * (lq_prop - log_q)
        thetas[accept] = props[accept]
        log_q[accept] = lq_prop[accept]
        cold_acc[t] = accept[0]

        # alternate even/odd adjacent pairs
        for i in range(t % 2, n_levels - 1, 2):
            swap_attempts[i] += 1
            log_alpha = (betas[i] - betas[i + 1]) * (log_q[i + 1] - log_q[i])
            acc = np.log(rng.random()) < log_alpha
            if acc:
                swap_accepts[i] += 1
                thetas[[i, i + 1]] = thetas[[i + 1, i]]
                log_q[[i, i + 1]] = log_q[[i + 1, i]]
            if ladder == "adaptive":
                gamma = (t + 1) ** -0.6
                log_gaps[i] += gamma * (float(acc) - adapt_target)
        if ladder == "adaptive":
            temps = 1.0 + np.concatenate([[0.0], np.cumsum(np.exp(log_gaps))])
            betas = 1.0 / temps
            beta_hist.append(betas.copy())

        cold[t] = thetas[0]
        cold_lq[t] = log_q[0]

    zeros = np.zeros(n, dtype=int)
    trace = SamplerTrace(
        cold, cold_lq, cold_acc, zeros, zeros,
        np.full(n, n_levels, dtype=int),
        target_evals=target.eval_count - start_evals,
    )
    rates = np.divide(swap_accepts, np.maximum(swap_attempts, 1))
    return PTResult(trace, betas, rates,
                    np.array(beta_hist) if beta_hist else None)


def mixture_proposal_mh(target, mix, *, n_steps, theta0, seed) -> SamplerTrace:
    """Independence Metropolis-Hastings with the mixture as proposal.

    Each proposal is evaluated exactly once (one target evaluation per
    iteration, accepted or not).
    """
    rng = derive_rng(seed)
    n = int(n_steps)
    d = target.dim
    props = mix.sample(rng, n)
    lq_props = target.log_q_batch(props)
    lmix_props = mix.log_density_batch(props)
    log_u = np.log(rng.random(n))

    theta = np.asarray(theta0, dtype=float)
    lq = target.log_q(theta)
    lmix = mix.log_density(theta)
    samples = np.empty((n, d))
    lqs = np.empty(n)
    accepted = np.zeros(n, dtype=bool)
    for t in range(n):
        if log_u[t] < (lq_props[t] - lmix_props[t]) - (lq - lmix):
            theta = props[t]
            lq = lq_props[t]
            lmix = lmix_props[t]
            accepted[t] = True
        samples[t] = theta
        lqs[t] = lq
    zeros = np.zeros(n, dtype=int)
    return SamplerTrace(samples, lqs, accepted, zeros, zeros,
                        np.ones(n, dtype=int), target_evals=n + 1)


# -- scale-augmented transport (component variances treated as unknown) -------

def _invgamma_draw(rng, shape, scale):
    return scale / rng.gamma(shape)


def _invgamma_logpdf(x, shape, scale):
    return shape * np.log(scale) - np.log(np.maximum(x, 1e-300)) * (shape + 1) \
        - scale / np.maximum(x, 1e-300) - _lgamma(shape)


def _lgamma(x):
    from scipy.special import gammaln
    return float(gammaln(x))


class ScaleMixtureAux:
    """Auxiliary density whose components carry an inverse-gamma prior on
    an isotropic variance: each component is the scale mixture of normals
    with that prior, i.e. a multivariate Student-t marginal.

    ``prior=("point", v)`` collapses the prior to a point mass at variance
    v, recovering fixed isotropic scales.
    """

    def __init__(self, means, weights=None, prior=("invgamma", 2.25, 1.25)):
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        k = self.means.shape[0]
        self.weights = np.full(k, 1.0 / k) if weights is None \
            else np.asarray(weights, dtype=float)
        self.prior = prior
        if prior[0] == "invgamma":
            self.a, self.b = float(prior[1]), float(prior[2])
        elif prior[0] == "point":
            self.point_var = float(prior[1])
        else:
            raise InputError(f"unknown prior kind {prior[0]!r}")

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def draw_variance(self, rng):
        if self.prior[0] == "point":
            return self.point_var
        return _invgamma_draw(rng, self.a, self.b)

    def draw_variance_posterior(self, rng, sq_dist):
        """Conditional variance draw given a point at squared distance
        sq_dist from the component mean (conjugate update)."""
        if self.prior[0] == "point":
            return self.point_var
        return _invgamma_draw(rng, self.a + 0.5 * self.dim, self.b + 0.5 * sq_dist)

    def component_marginal_logpdf(self, x):
        """(n, K) marginal component log densities (t for invgamma prior)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = self.dim
        out = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            sq = np.einsum("ni,ni->n", x - self.means[k], x - self.means[k])
            if self.prior[0] == "point":
                v = self.point_var
                out[:, k] = -0.5 * d * np.log(2 * np.pi * v) - 0.5 * sq / v
            else:
                nu, s2 = 2.0 * self.a, self.b / self.a
                out[:, k] = (
                    _lgamma(0.5 * (nu + d)) - _lgamma(0.5 * nu)
                    - 0.5 * d * np.log(nu * np.pi * s2)
                    - 0.5 * (nu + d) * np.log1p(sq / (nu * s2))
                )
        return out

    def log_density_batch(self, x):
        comp = self.component_marginal_logpdf(x)
        return logsumexp(comp + np.log(self.weights), axis=1)

    def index_logweight(self, target, theta_star, k, variance):
        """Unnormalized log selection weight of back-map (k, variance);
        one target evaluation."""
        point = np.sqrt(variance) * theta_star + self.means[k - 1]
        lq = target.log_q(point)
        return float(np.log(self.weights[k - 1]) + lq
                     - self.log_density_batch(point[None, :])[0]), point, lq


def variance_augmented_warp(
    target, aux: ScaleMixtureAux, *, n_steps, sigma, theta0, seed,
    inner_steps=10,
) -> SamplerTrace:
    """Transport sampler whose back-map index carries an unknown isotropic
    variance drawn against an inverse-gamma prior.

    Forward: the component is drawn from the marginal (Student-t)
    responsibilities, then the variance from its conjugate conditional.
    Inverse: a short Metropolis inner loop over (component, variance)
    pairs, proposing components uniformly and variances from the prior,
    started at the forward draw (which is already a draw from the correct
    conditional, so stationarity of the full chain is preserved for any
    inner-loop length).
    """
    rng = derive_rng(seed)
    state = ChainState.initialize(target, theta0, rng)
    n = int(n_steps)
    d = target.dim
    k_n = aux.n_components
    start_evals = target.eval_count - 1

    samples = np.empty((n, d))
    lqs = np.empty(n)
    accepted = np.zeros(n, dtype=bool)
    psi_arr = np.zeros(n, dtype=int)
    psi_prime_arr = np.zeros(n, dtype=int)
    evals = np.zeros(n, dtype=int)
    sigma2_draws = np.empty(n)

    for t in range(n):
        e0 = target.eval_count
        accepted[t] = rwm_step(state, target, sigma)
        state.n_steps += 1

        comp = aux.component_marginal_logpdf(state.theta[None, :])[0] + np.log(aux.weights)
        comp -= logsumexp(comp)
        psi = int(rng.choice(k_n, p=np.exp(comp) / np.exp(comp).sum())) + 1
        diff = state.theta - aux.means[psi - 1]
        var = aux.draw_variance_posterior(rng, float(diff @ diff))
        theta_star = diff / np.sqrt(var)

        j, s2 = psi, var
        logw, point, lq = aux.index_logweight(target, theta_star, j, s2)
        for _ in range(int(inner_steps)):
            j_prop = int(rng.integers(1, k_n + 1))
            s2_prop = aux.draw_variance(rng)
            logw_prop, point_prop, lq_prop = aux.index_logweight(
                target, theta_star, j_prop, s2_prop
            )
            if np.log(rng.random()) < logw_prop - logw:
                j, s2, logw, point, lq = j_prop, s2_prop, logw_prop, point_prop, lq_prop

        if j != psi:
            state.n_mode_jumps += 1
        state.theta = point
        state.log_q = lq
        samples[t] = point
        lqs[t] = lq
        psi_arr[t] = psi
        psi_prime_arr[t] = j
        sigma2_draws[t] = s2
        evals[t] = target.eval_count - e0

    return SamplerTrace(
        samples, lqs, accepted, psi_arr, psi_prime_arr, evals,
        target_evals=target.eval_count - start_evals,
        aux={"sigma2": sigma2_draws, "state": state},
    )
