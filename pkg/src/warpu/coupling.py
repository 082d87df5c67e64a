"""Coupled transport chains for unbiased expectation estimation.

Two chains with identical marginal kernels are driven so that they meet
exactly after a random time and stay together.  Three couplings do the
work: a maximal (or reflection) coupling of the local random-walk
proposals with a shared acceptance uniform, and exact discrete optimal
transport couplings of the two index draws of the transport step, with
squared distance between the post-transform states as the cost.  Optimal
transport is solved exactly by a transportation simplex with Bland's
anti-cycling rule.

Once the lead chain at time t equals the lagged chain at time t-1
componentwise, the pair is advanced by a single shared update, so
faithfulness holds exactly thereafter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .density import GaussianMixture, TargetDensity, inverse_index_distribution
from .errors import DegenerateStateError, InputError, NumericError
from .rngs import derive_rng
from .samplers import leapfrog


# -- exact discrete optimal transport -----------------------------------------


@dataclass
class OTPlan:
    """Optimal transport plan with its objective value.

    Row sums equal the first marginal and column sums the second, each to
    1e-10; total mass 1.
    """

    plan: np.ndarray
    objective: float
    n_pivots: int

    def sample(self, rng: np.random.Generator) -> tuple[int, int]:
        """Draw a (row, col) pair (0-based) from the joint plan."""
        flat = np.maximum(self.plan.ravel(), 0.0)
        flat = flat / flat.sum()
        idx = int(np.searchsorted(np.cumsum(flat), rng.random(), side="right"))
        idx = min(idx, flat.size - 1)
        return divmod(idx, self.plan.shape[1])


def _northwest_corner(p, q):
    m, n = p.size, q.size
    a, b = p.copy(), q.copy()
    basis = []
    values = {}
    i = j = 0
    while True:
        t = min(a[i], b[j])
        basis.append((i, j))
        values[(i, j)] = t
        a[i] -= t
        b[j] -= t
        if i == m - 1 and j == n - 1:
            break
        if (a[i] <= b[j] and i < m - 1) or j == n - 1:
            i += 1
        else:
            j += 1
    return basis, values


def _tree_potentials(basis, cost, m, n):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    adj = {k: [] for k in range(m + n)}
    for (i, j) in basis:
        adj[i].append((m + j, (i, j)))
        adj[m + j].append((i, (i, j)))
    u[0] = 0.0
    stack = [0]
    seen = {0}
    while stack:
        node = stack.pop()
        for nbr, (i, j) in adj[node]:
            if nbr in seen:
                continue
            seen.add(nbr)
            if nbr >= m:
                v[nbr - m] = cost[i, j] - u[i]
            else:
                u[nbr] = cost[i, j] - v[j]
            stack.append(nbr)
    if np.isnan(u).any() or np.isnan(v).any():
        raise NumericError("transportation basis is not a spanning tree")
    return u, v, adj


def _tree_path(adj, start, goal):
    parent = {start: (None, None)}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nbr, cell in adj[node]:
            if nbr not in parent:
                parent[nbr] = (node, cell)
                stack.append(nbr)
    cells = []
    node = goal
    while parent[node][0] is not None:
        node, cell = parent[node][0], parent[node][1]
        cells.append(cell)
    return cells  # ordered from goal back to start


def transportation_simplex(p, q, cost, *, tol=1e-11, max_pivots=None) -> OTPlan:
    """Exact optimal transport between two discrete distributions.

    Northwest-corner start, then primal pivots choosing the first cell in
    row-major order with negative reduced cost (Bland's rule; ties in the
    leaving ratio break toward the lexicographically smallest cell), which
    guarantees termination even on degenerate instances.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    cost = np.asarray(cost, dtype=float)
    m, n = p.size, q.size
    if cost.shape != (m, n):
        raise InputError(f"cost must have shape ({m}, {n})")
    if not np.isfinite(cost).all() or np.any(cost < 0):
        raise InputError("cost entries must be finite and nonnegative")
    for name, vec in (("first", p), ("second", q)):
        if np.any(vec < -1e-12) or abs(vec.sum() - 1.0) > 1e-10:
            raise InputError(f"{name} marginal is not a probability vector")
    p = np.maximum(p, 0.0)
    q = np.maximum(q, 0.0)

    basis, values = _northwest_corner(p, q)
    basis_set = set(basis)
    if max_pivots is None:
        max_pivots = 20 * m * n + 200

    pivots = 0
    while True:
        u, v, adj = _tree_potentials(basis, cost, m, n)
        reduced = cost - u[:, None] - v[None, :]
        flat = reduced.ravel()
        candidates = np.nonzero(flat < -tol)[0]
        entering = None
        for idx in candidates:
            cell = divmod(int(idx), n)
            if cell not in basis_set:
                entering = cell
                break
        if entering is None:
            break
        pivots += 1
        if pivots > max_pivots:
            raise NumericError("transportation simplex exceeded its pivot budget")

        path = _tree_path(adj, entering[0], m + entering[1])
        # cycle = entering(+), then path cells from the column node back to
        # the row node with alternating signs
        minus = path[0::2]
        plus = path[1::2]
        theta, leaving = min(
            ((values[c], c) for c in minus), key=lambda t: (t[0], t[1])
        )
        values[entering] = values.get(entering, 0.0) + theta
        for c in minus:
            values[c] -= theta
        for c in plus:
            values[c] += theta
        basis_set.remove(leaving)
        basis_set.add(entering)
        basis.remove(leaving)
        basis.append(entering)
        values.pop(leaving, None)

    plan = np.zeros((m, n))
    for (i, j), val in values.items():
        plan[i, j] = max(val, 0.0)
    return OTPlan(plan, float(np.sum(plan * cost)), pivots)


def discrete_ot_coupling(p, q, cost) -> OTPlan:
    """Exact optimal-transport coupling of two simplex vectors under a cost."""
    return transportation_simplex(p, q, cost)


def independent_coupling_objective(p, q, cost) -> float:
    """Objective of the product coupling p q^T (an upper bound on optimal)."""
    return float(np.asarray(p) @ np.asarray(cost) @ np.asarray(q))


# -- proposal couplings --------------------------------------------------------


def _iso_logpdf(x, mean, sigma):
    diff = (x - mean) / sigma
    return -0.5 * float(diff @ diff)  # common constants cancel in the ratios


def maximal_coupling_draw(mean1, mean2, sigma, rng):
    """Maximal coupling of two isotropic normals (rejection construction).

    Returns (x1, x2, same); the marginals are exact and the probability of
    x1 == x2 equals the total-variation overlap of the two normals.
    """
    mean1 = np.asarray(mean1, dtype=float)
    mean2 = np.asarray(mean2, dtype=float)
    if sigma <= 0:
        raise InputError("sigma must be positive")
    x = mean1 + sigma * rng.standard_normal(mean1.size)
    if np.log(rng.random()) + _iso_logpdf(x, mean1, sigma) <= _iso_logpdf(x, mean2, sigma):
        return x, x.copy(), True
    while True:
        y = mean2 + sigma * rng.standard_normal(mean2.size)
        if np.log(rng.random()) + _iso_logpdf(y, mean2, sigma) > _iso_logpdf(y, mean1, sigma):
            return x, y, False


def reflection_coupling_draw(mean1, mean2, sigma, rng):
    """Reflection-maximal coupling of two isotropic normals.

    The second draw reuses the first draw's noise reflected across the
    hyperplane orthogonal to the mean difference, except when the maximal
    overlap acceptance fires, in which case the draws coincide exactly.
    Returns (x1, x2, same).
    """
    mean1 = np.asarray(mean1, dtype=float)
    mean2 = np.asarray(mean2, dtype=float)
    if sigma <= 0:
        raise InputError("sigma must be positive")
    z_diff = (mean1 - mean2) / sigma
    norm = np.linalg.norm(z_diff)
    z = rng.standard_normal(mean1.size)
    x1 = mean1 + sigma * z
    if norm == 0.0:
        return x1, x1.copy(), True
    e = z_diff / norm
    shifted = z + z_diff
    if np.log(rng.random()) < -0.5 * float(shifted @ shifted) + 0.5 * float(z @ z):
        return x1, x1.copy(), True
    z_reflected = z - 2.0 * float(e @ z) * e
    return x1, mean2 + sigma * z_reflected, False


# -- coupled transport steps ---------------------------------------------------


@dataclass
class StepContext:
    """Everything a conditional-expectation estimator can condition on for
    one produced state: the realized state, the back-map selection law at
    the standardized point with its K candidate states, and (optionally)
    the pre-transport responsibilities with the selection laws at all K
    forward maps (for the two-stage conditional)."""

    state: np.ndarray
    nu_probs: np.ndarray | None = None
    nu_states: np.ndarray | None = None
    phi_probs: np.ndarray | None = None
    nu_probs_all: np.ndarray | None = None   # (K, K)
    nu_states_all: np.ndarray | None = None  # (K, K, d)


@dataclass
class CoupledChainState:
    """Lead chain at time t, lagged chain at time t-1, meeting bookkeeping."""

    theta1: np.ndarray
    theta2: np.ndarray
    log_q1: float
    log_q2: float
    rng: np.random.Generator
    t: int = 0
    met: bool = False
    tau: int | None = None

    def check_meeting(self):
        if not self.met and np.array_equal(self.theta1, self.theta2):
            self.met = True
            self.tau = self.t


def _coupled_local_move(cs, target, sigma, coupling, local, hmc_opts):
    """Coupled local proposals with one shared acceptance uniform.

    Returns the two post-move positions and their log densities.  For the
    Hamiltonian flavour the momenta are common random numbers; a fraction
    of steps still uses the coupled random-walk so exact meetings remain
    possible.
    """
    rng = cs.rng
    use_rwm = local == "rwm"
    if local == "hmc" and rng.random() < hmc_opts.get("mh_mix", 0.1):
        use_rwm = True
    if use_rwm:
        draw = maximal_coupling_draw if coupling == "maximal" else reflection_coupling_draw
        x1, x2, same = draw(cs.theta1, cs.theta2, sigma, rng)
        if same:
            lq_x1 = target.log_q(x1)
            lq_x2 = lq_x1
        else:
            lq_x1 = target.log_q(x1)
            lq_x2 = target.log_q(x2)
        log_u = np.log(rng.random())
        if log_u < lq_x1 - cs.log_q1:
            theta1, lq1 = x1, lq_x1
        else:
            theta1, lq1 = cs.theta1, cs.log_q1
        if log_u < lq_x2 - cs.log_q2:
            theta2, lq2 = x2, lq_x2
        else:
            theta2, lq2 = cs.theta2, cs.log_q2
        return theta1, theta2, lq1, lq2

    step_size = hmc_opts.get("step_size", 0.1)
    n_leap = hmc_opts.get("n_leapfrog", 10)
    p0 = rng.standard_normal(cs.theta1.size)  # shared momentum
    log_u = np.log(rng.random())
    out = []
    for theta, lq in ((cs.theta1, cs.log_q1), (cs.theta2, cs.log_q2)):
        prop, p1, ok = leapfrog(target.grad_log_q, theta, p0, step_size, n_leap)
        if ok:
            lq_prop = target.log_q(prop)
            drop = (lq_prop - 0.5 * p1 @ p1) - (lq - 0.5 * p0 @ p0)
            if log_u < drop:
                out.append((prop, lq_prop))
                continue
        out.append((theta, lq))
    return out[0][0], out[1][0], out[0][1], out[1][1]


def _index_pair_ot(probs1, probs2, points1, points2, rng):
    """Couple two index draws by exact OT with squared-distance cost."""
    cost = np.sum(
        (points1[:, None, :] - points2[None, :, :]) ** 2, axis=2
    )
    plan = transportation_simplex(probs1, probs2, cost)
    i, j = plan.sample(rng)
    return i + 1, j + 1


def coupled_warpu_step(
    cs: CoupledChainState, target: TargetDensity, mix: GaussianMixture,
    sigma: float, *, coupling="maximal", local="rwm", hmc_opts=None,
    record_l2=False,
):
    """Advance the coupled pair one iteration with two-stage index coupling.

    The local proposals are coupled (maximal or reflection) under a shared
    acceptance uniform; the forward indices are coupled by exact OT with
    cost equal to squared distance between the standardized candidates,
    and the back-map indices likewise with cost between back-mapped
    candidates.  Each chain's marginal law is exactly the single-chain
    transport kernel.  Returns (ctx1, ctx2) conditional-expectation
    contexts for the two freshly produced states.
    """
    if cs.met:
        raise InputError("pair already met; advance with the single-chain path")
    hmc_opts = hmc_opts or {}
    theta1, theta2, lq1, lq2 = _coupled_local_move(
        cs, target, sigma, coupling, local, hmc_opts
    )
    rng = cs.rng

    if np.array_equal(theta1, theta2):
        psi1 = psi2 = int(rng.choice(mix.n_components, p=mix.responsibilities(theta1))) + 1
    else:
        p1 = mix.responsibilities(theta1)
        p2 = mix.responsibilities(theta2)
        cand1 = np.vstack([mix.forward_warp(theta1, k + 1) for k in range(mix.n_components)])
        cand2 = np.vstack([mix.forward_warp(theta2, k + 1) for k in range(mix.n_components)])
        psi1, psi2 = _index_pair_ot(p1, p2, cand1, cand2, rng)
    star1 = mix.forward_warp(theta1, psi1)
    star2 = mix.forward_warp(theta2, psi2)

    shared_star = np.array_equal(star1, star2)
    try:
        nu1 = inverse_index_distribution(mix, target, star1)
        nu2 = nu1 if shared_star else inverse_index_distribution(mix, target, star2)
    except DegenerateStateError:
        # warp skipped for the affected chain(s) this step
        cs.theta1, cs.log_q1 = theta1, lq1
        cs.theta2, cs.log_q2 = theta2, lq2
        cs.t += 1
        cs.check_meeting()
        ctx = StepContext(cs.theta1.copy())
        return ctx, StepContext(cs.theta2.copy())

    if shared_star:
        psi1p = psi2p = nu1.draw(rng)
    else:
        psi1p, psi2p = _index_pair_ot(nu1.probs, nu2.probs, nu1.states, nu2.states, rng)

    cs.theta1 = nu1.states[psi1p - 1].copy()
    cs.log_q1 = float(nu1.log_q[psi1p - 1])
    cs.theta2 = nu2.states[psi2p - 1].copy()
    cs.log_q2 = float(nu2.log_q[psi2p - 1])
    cs.t += 1
    cs.check_meeting()

    ctx1 = StepContext(cs.theta1.copy(), nu1.probs.copy(), nu1.states.copy())
    ctx2 = StepContext(cs.theta2.copy(), nu2.probs.copy(), nu2.states.copy())
    if record_l2:
        _attach_l2(ctx1, mix, target, theta1, nu1, psi1)
        if np.array_equal(theta1, theta2):
            ctx2.phi_probs = ctx1.phi_probs
            ctx2.nu_probs_all = ctx1.nu_probs_all
            ctx2.nu_states_all = ctx1.nu_states_all
        else:
            _attach_l2(ctx2, mix, target, theta2, nu2, psi2)
    return ctx1, ctx2


def coupled_warpu_step_combined(
    cs: CoupledChainState, target: TargetDensity, mix: GaussianMixture,
    sigma: float, *, coupling="maximal", local="rwm", hmc_opts=None,
    record_l2=False,
):
    """One-shot coupling over the K^2 joint (forward, backward) index pairs.

    Each chain's joint law over (psi, psi') -- responsibilities times the
    back-map selection given the corresponding standardized point -- is
    enumerated (K^2 target evaluations per chain) and the two joint laws
    are coupled by one exact OT with cost equal to squared distance
    between final candidate states.  Marginally each chain moves by the
    same two-stage law as the separate coupling.
    """
    if cs.met:
        raise InputError("pair already met; advance with the single-chain path")
    if mix.n_components > 64:
        raise InputError("combined coupling is limited to K <= 64")
    hmc_opts = hmc_opts or {}
    theta1, theta2, lq1, lq2 = _coupled_local_move(
        cs, target, sigma, coupling, local, hmc_opts
    )
    rng = cs.rng

    enum1 = _enumerate_joint(mix, target, theta1)
    enum2 = enum1 if np.array_equal(theta1, theta2) else _enumerate_joint(mix, target, theta2)
    if enum1 is None or enum2 is None:
        cs.theta1, cs.log_q1 = theta1, lq1
        cs.theta2, cs.log_q2 = theta2, lq2
        cs.t += 1
        cs.check_meeting()
        return StepContext(cs.theta1.copy()), StepContext(cs.theta2.copy())
    probs1, states1, logq1, nus1, phi1 = enum1
    probs2, states2, logq2, nus2, phi2 = enum2

    if enum2 is enum1:
        flat = int(np.searchsorted(np.cumsum(probs1), rng.random(), side="right"))
        flat = min(flat, probs1.size - 1)
        a = b = flat
    else:
        k2 = probs1.size
        flat1 = states1.reshape(k2, -1)
        flat2 = states2.reshape(k2, -1)
        cost = np.sum((flat1[:, None, :] - flat2[None, :, :]) ** 2, axis=2)
        plan = transportation_simplex(probs1, probs2, cost)
        a, b = plan.sample(rng)

    k_n = mix.n_components
    cs.theta1 = states1.reshape(k_n * k_n, -1)[a].copy()
    cs.log_q1 = float(logq1.reshape(-1)[a])
    cs.theta2 = states2.reshape(k_n * k_n, -1)[b].copy()
    cs.log_q2 = float(logq2.reshape(-1)[b])
    cs.t += 1
    cs.check_meeting()

    psi1 = a // k_n
    psi2 = b // k_n
    ctx1 = StepContext(cs.theta1.copy(), nus1[psi1].probs.copy(), nus1[psi1].states.copy())
    ctx2 = StepContext(cs.theta2.copy(), nus2[psi2].probs.copy(), nus2[psi2].states.copy())
    if record_l2:
        for ctx, nus, phi in ((ctx1, nus1, phi1), (ctx2, nus2, phi2)):
            ctx.phi_probs = phi.copy()
            ctx.nu_probs_all = np.vstack([nu.probs for nu in nus])
            ctx.nu_states_all = np.stack([nu.states for nu in nus])
    return ctx1, ctx2


def _enumerate_joint(mix, target, theta):
    """Joint law of (forward index, back index) at a point: probabilities
    (K*K,), candidate final states (K, K, d), their target log densities,
    the per-forward-index selection results, and the responsibilities."""
    k_n = mix.n_components
    phi = mix.responsibilities(theta)
    nus = []
    probs = np.empty((k_n, k_n))
    states = np.empty((k_n, k_n, mix.dim))
    logq = np.empty((k_n, k_n))
    for k in range(k_n):
        star = mix.forward_warp(theta, k + 1)
        try:
            nu = inverse_index_distribution(mix, target, star)
        except DegenerateStateError:
            return None
        nus.append(nu)
        probs[k] = phi[k] * nu.probs
        states[k] = nu.states
        logq[k] = nu.log_q
    flat = probs.reshape(-1)
    flat = np.maximum(flat, 0.0)
    flat /= flat.sum()
    return flat, states, logq, nus, phi


def _attach_l2(ctx, mix, target, theta, nu_own, psi_own):
    """Two-stage conditional context: selection laws at all K forward maps
    (the one belonging to the realized forward index is reused, the other
    K-1 are evaluated: K*(K-1) extra target evaluations)."""
    k_n = mix.n_components
    ctx.phi_probs = mix.responsibilities(theta)
    probs_all = np.empty((k_n, k_n))
    states_all = np.empty((k_n, k_n, mix.dim))
    for k in range(k_n):
        if k == psi_own - 1:
            nu = nu_own
        else:
            star = mix.forward_warp(theta, k + 1)
            try:
                nu = inverse_index_distribution(mix, target, star)
            except DegenerateStateError:
                probs_all[k] = 0.0
                states_all[k] = 0.0
                continue
        probs_all[k] = nu.probs
        states_all[k] = nu.states
    ctx.nu_probs_all = probs_all
    ctx.nu_states_all = states_all


def single_warpu_update(cs, target, mix, sigma, *, record_l2=False):
    """Post-meeting update: one transport move applied to both chains."""
    rng = cs.rng
    prop = cs.theta1 + sigma * rng.standard_normal(cs.theta1.size)
    lq_prop = target.log_q(prop)
    if np.log(rng.random()) < lq_prop - cs.log_q1:
        theta, lq = prop, lq_prop
    else:
        theta, lq = cs.theta1, cs.log_q1
    psi = int(rng.choice(mix.n_components, p=mix.responsibilities(theta))) + 1
    star = mix.forward_warp(theta, psi)
    try:
        nu = inverse_index_distribution(mix, target, star)
        psi_p = nu.draw(rng)
        cs.theta1 = nu.states[psi_p - 1].copy()
        cs.log_q1 = float(nu.log_q[psi_p - 1])
        ctx = StepContext(cs.theta1.copy(), nu.probs.copy(), nu.states.copy())
        if record_l2:
            _attach_l2(ctx, mix, target, theta, nu, psi)
    except DegenerateStateError:
        cs.theta1 = np.asarray(theta, dtype=float).copy()
        cs.log_q1 = lq
        ctx = StepContext(cs.theta1.copy())
    cs.theta2 = cs.theta1.copy()
    cs.log_q2 = cs.log_q1
    cs.t += 1
    return ctx


# -- unbiased estimators -------------------------------------------------------


def unbiased_H(trace1, trace2, tau, j, h) -> float:
    """Single-anchor unbiased estimate: the lead chain's value at time j
    plus the telescoping correction up to the meeting time.

    ``trace1[t]`` is the lead chain at time t, ``trace2[t]`` the lagged
    chain at time t (its value is compared against the lead chain one step
    later).  The correction is empty when the chains met at or before
    j + 1.
    """
    if j < 0:
        raise InputError("anchor index must be nonnegative")
    if tau is None:
        raise InputError("chains never met; no unbiased estimate exists")
    if len(trace1) < max(tau, j + 1) or len(trace2) < max(tau - 1, 0):
        raise InputError("traces are shorter than the meeting time")
    total = float(h(trace1[j]))
    for t in range(j + 1, tau):
        total += float(h(trace1[t])) - float(h(trace2[t - 1]))
    return total


def unbiased_H_lm(trace1, trace2, tau, l, m, h) -> float:
    """Average of the single-anchor estimates for anchors l..m."""
    if not 0 <= l <= m:
        raise InputError("need 0 <= l <= m")
    return float(np.mean([unbiased_H(trace1, trace2, tau, j, h) for j in range(l, m + 1)]))


def rao_blackwell_h(level, ctx: StepContext, h) -> float:
    """Value (or conditional expectation) of h for one produced state.

    L0 is h at the state itself.  L1 averages h over the K back-map
    candidates under the recorded selection law (no target evaluations:
    the candidates were already evaluated when the step ran).  L2 also
    averages over the forward index under the responsibilities, using the
    selection laws at all K forward maps (recorded only when the run asked
    for them; K^2 target evaluations at recording time).
    """
    if level == "L0":
        return float(h(ctx.state))
    if level == "L1":
        if ctx.nu_probs is None:
            raise InputError("no back-map context recorded for this step")
        vals = np.array([float(h(s)) for s in ctx.nu_states])
        return float(ctx.nu_probs @ vals)
    if level == "L2":
        if ctx.nu_probs_all is None:
            raise InputError("two-stage context was not recorded for this step")
        total = 0.0
        for k in range(ctx.phi_probs.size):
            vals = np.array([float(h(s)) for s in ctx.nu_states_all[k]])
            total += ctx.phi_probs[k] * float(ctx.nu_probs_all[k] @ vals)
        return float(total)
    raise InputError(f"unknown conditional-expectation level {level!r}")


@dataclass
class CoupledRun:
    """Everything recorded from one coupled pair."""

    trace1: np.ndarray            # lead chain, times 0..T
    trace2: np.ndarray            # lagged chain, times 0..T-1
    tau: int | None
    contexts1: list               # StepContext per time (index 0 is None)
    contexts2: list
    target_evals: int
    wall_ms: float
    scheme: str
    coupling: str

    def h_values(self, h, level="L0", chain=1) -> np.ndarray:
        trace = self.trace1 if chain == 1 else self.trace2
        ctxs = self.contexts1 if chain == 1 else self.contexts2
        out = np.empty(len(trace))
        for t in range(len(trace)):
            if level == "L0" or ctxs[t] is None:
                out[t] = float(h(trace[t]))
            else:
                ctx = ctxs[t]
                if level != "L0" and ctx.nu_probs is None:
                    out[t] = float(h(trace[t]))  # warp-skipped step
                else:
                    out[t] = rao_blackwell_h(level, ctx, h)
        return out

    def estimate(self, h, l, m, level="L0") -> float:
        """Anchor-averaged unbiased estimate using recorded contexts."""
        if self.tau is None:
            raise InputError("chains never met within the step budget")
        if l < 1 and level != "L0":
            raise InputError("conditional levels need anchors at time >= 1")
        h1 = self.h_values(h, level, chain=1)
        h2 = self.h_values(h, level, chain=2)
        tau, n_anchor = self.tau, m - l + 1
        total = float(h1[l:m + 1].sum())
        for t in range(l + 1, tau):
            w = min(m, t - 1) - l + 1
            total += w * (h1[t] - h2[t - 1])
        return total / n_anchor


def run_coupled_warpu(
    target, mix, *, sigma, m, seed, initial, scheme="separate",
    coupling="maximal", local="rwm", hmc_opts=None, record_l2=False,
    max_steps=100_000,
) -> CoupledRun:
    """Drive a coupled pair until it has met and the lead chain has at
    least ``m`` recorded times.

    ``initial`` draws the two starting points: a dict understood by the
    samplers' initial-density spec or a callable (rng, n) -> (n, d).
    """
    if scheme not in ("separate", "combined"):
        raise InputError(f"unknown coupling scheme {scheme!r}")
    if coupling not in ("maximal", "reflection"):
        raise InputError(f"unknown proposal coupling {coupling!r}")
    from .samplers import _initial_sampler

    t0 = time.perf_counter()
    rng = derive_rng(seed)
    draw0 = _initial_sampler(initial, target.dim)
    before = target.eval_count
    starts = draw0(rng, 2)
    theta10, theta20 = starts[0], starts[1]

    cs = CoupledChainState(
        theta1=np.asarray(theta10, dtype=float).copy(),
        theta2=np.asarray(theta20, dtype=float).copy(),
        log_q1=target.log_q(theta10),
        log_q2=target.log_q(theta20),
        rng=rng,
    )

    trace1 = [cs.theta1.copy()]
    trace2 = [cs.theta2.copy()]
    contexts1 = [None]
    contexts2 = [None]

    # one solo move of the lead chain establishes the lag
    ctx1 = _solo_lead_step(cs, target, mix, sigma, record_l2)
    cs.t = 1
    cs.check_meeting()
    trace1.append(cs.theta1.copy())
    contexts1.append(ctx1)

    step = coupled_warpu_step if scheme == "separate" else coupled_warpu_step_combined
    while (cs.tau is None or cs.t < m) and cs.t < max_steps:
        if cs.met:
            ctx = single_warpu_update(cs, target, mix, sigma, record_l2=record_l2)
            trace1.append(cs.theta1.copy())
            trace2.append(cs.theta2.copy())
            contexts1.append(ctx)
            contexts2.append(ctx)
        else:
            ctx1, ctx2 = step(
                cs, target, mix, sigma, coupling=coupling, local=local,
                hmc_opts=hmc_opts, record_l2=record_l2,
            )
            trace1.append(cs.theta1.copy())
            trace2.append(cs.theta2.copy())
            contexts1.append(ctx1)
            contexts2.append(ctx2)

    wall_ms = (time.perf_counter() - t0) * 1e3
    return CoupledRun(
        np.array(trace1), np.array(trace2), cs.tau,
        contexts1, contexts2,
        target.eval_count - before, wall_ms, scheme, coupling,
    )


def _solo_lead_step(cs, target, mix, sigma, record_l2):
    """Advance only the lead chain by one full transport iteration."""
    rng = cs.rng
    prop = cs.theta1 + sigma * rng.standard_normal(cs.theta1.size)
    lq_prop = target.log_q(prop)
    if np.log(rng.random()) < lq_prop - cs.log_q1:
        theta, lq = prop, lq_prop
    else:
        theta, lq = cs.theta1, cs.log_q1
    psi = int(rng.choice(mix.n_components, p=mix.responsibilities(theta))) + 1
    star = mix.forward_warp(theta, psi)
    try:
        nu = inverse_index_distribution(mix, target, star)
        psi_p = nu.draw(rng)
        cs.theta1 = nu.states[psi_p - 1].copy()
        cs.log_q1 = float(nu.log_q[psi_p - 1])
        ctx = StepContext(cs.theta1.copy(), nu.probs.copy(), nu.states.copy())
        if record_l2:
            _attach_l2(ctx, mix, target, theta, nu, psi)
        return ctx
    except DegenerateStateError:
        cs.theta1 = np.asarray(theta, dtype=float).copy()
        cs.log_q1 = lq
        return StepContext(cs.theta1.copy())
