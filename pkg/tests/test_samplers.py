import numpy as np
import pytest
from scipy.stats import ks_2samp

from warpu.density import GaussianMixture, TargetDensity
from warpu.errors import InputError
from warpu.metrics import ess_autocorrelation, mode_occupancy
from warpu.rngs import derive_rng
from warpu.samplers import (
    ChainState,
    ScaleMixtureAux,
    annealed_inverse_index,
    hmc_step,
    leapfrog,
    make_rwm_kernel,
    mixture_proposal_mh,
    run_adaptive_warpu,
    run_basic_warpu,
    run_parallel_tempering,
    rwm_step,
    variance_augmented_warp,
    warpu_step,
)
from warpu.targets import bimodal_gauss, trimodal_1d


def std_gauss_target(d=1):
    return TargetDensity(
        d,
        lambda th: -0.5 * float(th @ th),
        log_q_batch=lambda x: -0.5 * np.einsum("ni,ni->n", x, x),
        grad_log_q=lambda th: -th,
    )


class _ZeroNoise:
    """rng stub: zero proposals, fixed uniforms."""

    def __init__(self, u=0.5):
        self.u = u

    def standard_normal(self, size=None):
        return np.zeros(size if size is not None else ())

    def random(self, size=None):
        return self.u if size is None else np.full(size, self.u)


class TestRwmStep:
    def test_zero_proposal_always_accepted(self):
        target = std_gauss_target()
        state = ChainState(np.array([1.0]), target.log_q(np.array([1.0])),
                           _ZeroNoise(u=0.999999))
        # proposal equals the current point; ratio is one, so even a
        # near-one uniform accepts
        assert rwm_step(state, target, sigma=2.0)
        np.testing.assert_array_equal(state.theta, [1.0])

    def test_one_evaluation_per_step(self):
        target = std_gauss_target()
        state = ChainState.initialize(target, np.array([0.0]), derive_rng(0))
        before = target.eval_count
        for _ in range(25):
            rwm_step(state, target, sigma=1.0)
        assert target.eval_count - before == 25

    def test_long_run_mean(self):
        target = std_gauss_target()
        state = ChainState.initialize(target, np.array([0.0]), derive_rng(1))
        total, total_sq, n = 0.0, 0.0, 100_000
        for _ in range(n):
            rwm_step(state, target, sigma=2.4)
            total += state.theta[0]
            total_sq += state.theta[0] ** 2
        mean = total / n
        # conservative SE: sd/sqrt(n/20) allows for autocorrelation
        assert abs(mean) < 3 * np.sqrt(total_sq / n) / np.sqrt(n / 20)

    def test_cached_log_q_tracks_state(self):
        target = std_gauss_target()
        state = ChainState.initialize(target, np.array([0.3]), derive_rng(2))
        for _ in range(50):
            rwm_step(state, target, sigma=1.0)
            assert state.log_q == pytest.approx(-0.5 * state.theta @ state.theta)

    def test_sigma_must_be_positive(self):
        target = std_gauss_target()
        state = ChainState.initialize(target, np.array([0.0]), derive_rng(3))
        with pytest.raises(InputError):
            rwm_step(state, target, sigma=0.0)


class TestHmcStep:
    def test_tiny_step_size_accepts(self):
        target = std_gauss_target(2)
        state = ChainState.initialize(target, np.array([1.0, -1.0]), derive_rng(4))
        accepted = sum(hmc_step(state, target, 1e-5, 2) for _ in range(50))
        assert accepted == 50

    def test_energy_error_shrinks_with_step(self):
        # finite-difference check: halving the step size cuts the energy
        # error by about four (second-order integrator)
        target = std_gauss_target(3)
        rng = derive_rng(5)
        theta = rng.standard_normal(3)
        p = rng.standard_normal(3)

        def energy_error(eps, n):
            t1, p1, ok = leapfrog(target.grad_log_q, theta, p, eps, n)
            assert ok
            h0 = 0.5 * p @ p + 0.5 * theta @ theta
            h1 = 0.5 * p1 @ p1 + 0.5 * t1 @ t1
            return abs(h1 - h0)

        e_full = energy_error(0.2, 50)
        e_half = energy_error(0.1, 100)
        assert e_half < e_full / 2.5

    def test_reversibility(self):
        target = std_gauss_target(2)
        rng = derive_rng(6)
        theta = rng.standard_normal(2)
        p = rng.standard_normal(2)
        t1, p1, _ = leapfrog(target.grad_log_q, theta, p, 0.1, 30)
        t2, p2, _ = leapfrog(target.grad_log_q, t1, -p1, 0.1, 30)
        np.testing.assert_allclose(t2, theta, atol=1e-8)
        np.testing.assert_allclose(-p2, p, atol=1e-8)

    def test_bad_gradient_rejects_with_flag(self):
        target = TargetDensity(
            1, lambda th: -0.5 * float(th @ th),
            grad_log_q=lambda th: np.array([np.nan]),
        )
        state = ChainState.initialize(target, np.array([0.0]), derive_rng(7))
        assert not hmc_step(state, target, 0.1, 5)
        assert state.n_grad_failures == 1


class TestWarpuStep:
    def test_single_identity_component_reduces_to_local(self):
        mix = GaussianMixture([1.0], [[0.0]], np.array([[[1.0]]]))
        target = std_gauss_target()
        state = ChainState.initialize(target, np.array([0.4]), derive_rng(8))
        shadow = ChainState.initialize(target, np.array([0.4]), derive_rng(8))
        kernel = make_rwm_kernel(1.0)
        for _ in range(30):
            warpu_step(state, target, mix, kernel)
            rwm_step(shadow, target, 1.0)
            np.testing.assert_allclose(state.theta, shadow.theta, atol=1e-12)

    def test_mode_hopping_probability_near_mode(self, trimodal, trimodal_mix):
        # at a mode center of the matched mixture the back-map selection
        # equals the mixture weights, so hops happen with the complement
        from warpu.density import inverse_index_distribution

        star = trimodal_mix.forward_warp(np.array([0.0]), 2)  # center of mode 2
        nu = inverse_index_distribution(trimodal_mix, trimodal.target, star)
        np.testing.assert_allclose(nu.probs, trimodal_mix.weights, rtol=1e-10)
        assert 1.0 - nu.probs[1] == pytest.approx(0.6, abs=1e-10)

    def test_shift_only_composition_stays_on_lattice(self):
        # without the local move, equal-scale transports only translate by
        # differences of the component centers: everything stays on the
        # lattice generated by those shifts
        from warpu.density import transport_step

        mix = GaussianMixture([0.5, 0.5], [[-1.0], [1.0]],
                              np.array([1.0, 1.0]).reshape(2, 1, 1))
        bt = trimodal_1d()
        rng = derive_rng(9)
        theta0 = np.array([0.3])
        theta = theta0.copy()
        for _ in range(200):
            theta, _, _, _ = transport_step(mix, bt.target, theta, rng)
            offset = (theta[0] - theta0[0]) / 2.0  # lattice spacing |mu1-mu2|=2
            assert offset == pytest.approx(round(offset), abs=1e-9)

    def test_evaluation_budget_per_step(self, trimodal, trimodal_mix):
        target = trimodal.target
        state = ChainState.initialize(target, np.array([0.0]), derive_rng(10))
        kernel = make_rwm_kernel(1.0)
        before = target.eval_count
        rec = warpu_step(state, target, trimodal_mix, kernel)
        assert target.eval_count - before == 1 + trimodal_mix.n_components
        assert rec["evals"] == 1 + trimodal_mix.n_components

    def test_degenerate_warp_skipped_and_flagged(self):
        compact = TargetDensity(
            1, lambda th: 0.0 if abs(th[0]) < 0.8 else -np.inf,
            log_q_batch=lambda x: np.where(np.abs(x[:, 0]) < 0.8, 0.0, -np.inf),
        )
        mix = GaussianMixture([1.0], [[50.0]], np.array([[[1.0]]]))
        state = ChainState.initialize(compact, np.array([0.0]), derive_rng(11))
        rec = warpu_step(state, compact, mix, make_rwm_kernel(0.1))
        assert rec["psi_prime"] == 0
        assert state.n_warp_skips == 1
        assert abs(state.theta[0]) < 0.8  # stayed at the local-kernel state


class TestBasicDriver:
    def test_seed_determinism(self, trimodal, trimodal_mix):
        a = run_basic_warpu(trimodal.target, trimodal_mix, n_steps=200,
                            sigma=1.0, theta0=np.array([0.0]), seed=42)
        b = run_basic_warpu(trimodal.target, trimodal_mix, n_steps=200,
                            sigma=1.0, theta0=np.array([0.0]), seed=42)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.psi_prime, b.psi_prime)

    def test_bimodal_mode_fractions(self):
        mix = GaussianMixture([0.5, 0.5], [[-4.0], [4.0]],
                              np.array([1.0, 1.0]).reshape(2, 1, 1))
        bt = TargetDensity(
            1, lambda th: float(mix.log_density(th)),
            log_q_batch=mix.log_density_batch,
        )
        trace = run_basic_warpu(bt, mix, n_steps=50_000, sigma=1.0,
                                theta0=np.array([-4.0]), seed=3)
        occ = mode_occupancy(trace.samples, np.array([[-4.0], [4.0]]))
        assert abs(occ[0] - 0.5) < 0.1

    def test_lower_autocorrelation_than_independence_mh(self):
        # the transport chain decorrelates faster than an independence
        # proposal from the same mixture on a separated multimodal target
        bt = trimodal_1d()
        mix = bt.matched_mixture
        warp = run_basic_warpu(bt.target, mix, n_steps=20_000, sigma=1.0,
                               theta0=np.array([0.0]), seed=5)
        imh = mixture_proposal_mh(bt.target, mix, n_steps=20_000,
                                  theta0=np.array([0.0]), seed=5)

        def lag_autocorr(x, lag=10):
            x = x - x.mean()
            return float(x[:-lag] @ x[lag:] / (x @ x))

        assert lag_autocorr(warp.samples[:, 0]) < lag_autocorr(imh.samples[:, 0])

    def test_stationarity_from_exact_draws(self, trimodal, trimodal_mix):
        # initialize at exact target draws, apply one full step to each:
        # the marginal law is unchanged
        rng = derive_rng(12)
        n = 50_000
        draws = trimodal.sampler(rng, n)
        kernel = make_rwm_kernel(1.0)
        out = np.empty(n)
        state = ChainState(np.zeros(1), 0.0, rng)
        for i in range(n):
            state.theta = draws[i].copy()
            state.log_q = trimodal.target.log_q(draws[i])
            warpu_step(state, trimodal.target, trimodal_mix, kernel)
            out[i] = state.theta[0]
        fresh = trimodal.sampler(rng, n)[:, 0]
        assert ks_2samp(out, fresh).pvalue > 0.01

    def test_trace_csv_round_trip(self, trimodal, trimodal_mix, tmp_path):
        trace = run_basic_warpu(trimodal.target, trimodal_mix, n_steps=50,
                                sigma=1.0, theta0=np.array([0.0]), seed=1)
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "step,accepted,psi,psi_prime,theta_1"
        from warpu.samplers import SamplerTrace

        back = SamplerTrace.from_csv(path)
        np.testing.assert_array_equal(back.samples, trace.samples)
        np.testing.assert_array_equal(back.psi, trace.psi)


class TestAnnealedIndex:
    def test_unit_constant_returns_input_unchanged(self):
        p = np.array([0.9, 0.1])
        assert annealed_inverse_index(p, 1.0) is p

    def test_limit_is_uniform_on_support(self):
        p = np.array([0.9, 0.1, 0.0])
        out = annealed_inverse_index(p, 1e12)
        np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-9)

    def test_hand_value_at_two(self):
        p = np.array([0.9, 0.1])
        out = annealed_inverse_index(p, 2.0)
        expected = np.sqrt(p) / np.sqrt(p).sum()
        np.testing.assert_allclose(out, expected, rtol=1e-14)
        np.testing.assert_allclose(expected[0], 0.75, atol=0.01)

    def test_rejects_sub_unit_constant(self):
        with pytest.raises(InputError):
            annealed_inverse_index(np.array([1.0]), 0.5)

    def test_unit_constant_run_bit_identical(self, trimodal, trimodal_mix):
        a = run_basic_warpu(trimodal.target, trimodal_mix, n_steps=100,
                            sigma=1.0, theta0=np.array([0.0]), seed=8,
                            annealing_c=1.0)
        b = run_basic_warpu(trimodal.target, trimodal_mix, n_steps=100,
                            sigma=1.0, theta0=np.array([0.0]), seed=8)
        np.testing.assert_array_equal(a.samples, b.samples)


class TestAdaptiveDriver:
    def test_zero_stages_returns_initial_draws(self, trimodal):
        res = run_adaptive_warpu(
            trimodal.target, n_per_stage=300, n_stages=0, k=3, seed=1,
            initial={"kind": "uniform", "low": -10, "high": 10}, sigma=1.0,
        )
        assert res.samples.shape == (300, 1)
        assert res.stage_traces == []

    def test_no_refit_reduces_to_basic_runs(self, trimodal):
        # mirrors the driver's stream discipline: initial pool, one EM fit,
        # then plain chained runs of the basic driver with the same mixture
        from warpu.fit import em_fit
        from warpu.samplers import _initial_sampler

        seed, T, M, k = 21, 200, 3, 3
        res = run_adaptive_warpu(
            trimodal.target, n_per_stage=T, n_stages=M, k=k, seed=seed,
            initial={"kind": "uniform", "low": -12, "high": 12}, sigma=1.0,
            refit_schedule=lambda s: 0.0,
        )
        assert all(m is res.mixtures[0] for m in res.mixtures)
        assert res.refit_flags == [False] * M

        rng = derive_rng(seed)
        pool = _initial_sampler({"kind": "uniform", "low": -12, "high": 12}, 1)(rng, T)
        mix = em_fit(pool, k, seed=int(rng.integers(2**63)))
        state = ChainState.initialize(trimodal.target, pool[0], rng)
        for s in range(M):
            manual = run_basic_warpu(trimodal.target, mix, n_steps=T,
                                     initial_state=state, sigma=1.0)
            rng.random()  # the driver's refit coin
            np.testing.assert_array_equal(manual.samples,
                                          res.stage_traces[s].samples)

    def test_stage_evaluation_accounting(self, trimodal):
        res = run_adaptive_warpu(
            trimodal.target, n_per_stage=150, n_stages=4, k=2, seed=5,
            initial={"kind": "uniform", "low": -12, "high": 12}, sigma=1.0,
        )
        for trace in res.stage_traces:
            assert trace.target_evals == (2 + 1) * 150

    def test_rejects_unknown_policy(self, trimodal):
        with pytest.raises(InputError):
            run_adaptive_warpu(
                trimodal.target, n_per_stage=100, n_stages=1, k=2, seed=0,
                initial={"kind": "uniform", "low": -1, "high": 1}, sigma=1.0,
                refit_policy="sometimes",
            )

    def test_subsample_policy_runs(self, trimodal):
        res = run_adaptive_warpu(
            trimodal.target, n_per_stage=200, n_stages=3, k=2, seed=2,
            initial={"kind": "uniform", "low": -12, "high": 12}, sigma=1.0,
            refit_policy="subsample",
        )
        assert len(res.stage_traces) == 3


class TestParallelTempering:
    def test_unit_temperature_swaps_always_accepted(self):
        target = std_gauss_target(2)
        res = run_parallel_tempering(
            target, n_levels=4, n_steps=300, sigma=1.0,
            theta0=np.zeros(2), seed=3, beta_min=1.0,
        )
        np.testing.assert_allclose(res.swap_rates, 1.0)

    def test_unimodal_mean(self):
        target = std_gauss_target(1)
        res = run_parallel_tempering(
            target, n_levels=4, n_steps=30_000, sigma=1.5,
            theta0=np.array([3.0]), seed=4,
        )
        x = res.cold_trace.samples[2_000:, 0]
        assert abs(x.mean()) < 3 * x.std() / np.sqrt(x.size / 20)

    def test_adaptive_ladder_moves_toward_target_rate(self):
        target = std_gauss_target(3)
        res = run_parallel_tempering(
            target, n_levels=6, n_steps=4_000, sigma=1.0,
            theta0=np.zeros(3), seed=5, ladder="adaptive",
        )
        assert res.beta_history is not None
        assert res.betas[0] == 1.0
        assert np.all(np.diff(res.betas) < 0)

    def test_eval_accounting(self):
        target = std_gauss_target(1)
        before = target.eval_count
        run_parallel_tempering(target, n_levels=5, n_steps=100, sigma=1.0,
                               theta0=np.zeros(1), seed=6)
        assert target.eval_count - before == 5 * 100 + 5  # init + per-sweep


class TestMixtureProposalMH:
    def test_target_equal_mixture_accepts_everything(self, trimodal, trimodal_mix):
        trace = mixture_proposal_mh(trimodal.target, trimodal_mix,
                                    n_steps=2_000, theta0=np.array([0.0]), seed=7)
        assert trace.acceptance_rate == 1.0

    def test_ess_grows_linearly_for_unimodal(self):
        target = std_gauss_target(1)
        mix = GaussianMixture([1.0], [[0.0]], np.array([[[1.2]]]))
        esses = []
        for n in (2_000, 8_000):
            tr = mixture_proposal_mh(target, mix, n_steps=n,
                                     theta0=np.array([0.0]), seed=8)
            esses.append(ess_autocorrelation(tr.samples[:, 0])[0])
        assert esses[1] > 2.5 * esses[0]


class TestVarianceAugmented:
    def test_point_mass_prior_inner_law_matches_selection(self):
        # with the prior collapsed to unit variance, the inner Metropolis
        # kernel's stationary law over components must equal the unit-scale
        # back-map selection distribution (exact transition-matrix check)
        bt = trimodal_1d()
        means = bt.mode_centers
        aux = ScaleMixtureAux(means, prior=("point", 1.0))
        star = np.array([0.35])

        logw = np.array([
            aux.index_logweight(bt.target, star, k, 1.0)[0] for k in (1, 2, 3)
        ])
        w = np.exp(logw - logw.max())
        stationary_target = w / w.sum()

        k_n = 3
        trans = np.zeros((k_n, k_n))
        for i in range(k_n):
            for j in range(k_n):
                if i == j:
                    continue
                acc = min(1.0, np.exp(logw[j] - logw[i]))
                trans[i, j] = acc / k_n
            trans[i, i] = 1.0 - trans[i].sum()
        evals, evecs = np.linalg.eig(trans.T)
        stat = np.real(evecs[:, np.argmax(np.real(evals))])
        stat = stat / stat.sum()
        np.testing.assert_allclose(stat, stationary_target, atol=1e-10)

        unit_mix = GaussianMixture(
            np.full(3, 1 / 3), means, np.array([np.eye(1)] * 3)
        )
        from warpu.density import inverse_index_distribution

        nu = inverse_index_distribution(unit_mix, bt.target, star)
        np.testing.assert_allclose(stationary_target, nu.probs, rtol=1e-10)

    def test_variance_draws_match_prior_under_self_target(self):
        # when the target IS the scale-mixture auxiliary, the stationary
        # variance law is the prior: mean b/(a-1) = 1
        a, b = 2.25, 1.25
        aux = ScaleMixtureAux(np.array([[-1.0], [1.0]]), prior=("invgamma", a, b))
        target = TargetDensity(
            1, lambda th: float(aux.log_density_batch(th[None, :])[0]),
            log_q_batch=aux.log_density_batch,
        )
        trace = variance_augmented_warp(
            target, aux, n_steps=4_000, sigma=1.0,
            theta0=np.array([1.0]), seed=11, inner_steps=8,
        )
        s2 = trace.aux["sigma2"]
        se = s2.std(ddof=1) / np.sqrt(s2.size / 10)  # allow autocorrelation
        assert abs(s2.mean() - b / (a - 1.0)) < 3 * se

    def test_point_prior_matches_unit_scale_transport_law(self):
        bt = bimodal_gauss(dim=1, sep=2.0)
        aux = ScaleMixtureAux(bt.mode_centers, prior=("point", 1.0))
        tr = variance_augmented_warp(bt.target, aux, n_steps=20_000, sigma=0.8,
                                     theta0=np.array([2.0]), seed=13,
                                     inner_steps=10)
        assert np.all(tr.aux["sigma2"] == 1.0)
        fresh = bt.sampler(derive_rng(14), 20_000)[:, 0]
        assert ks_2samp(tr.samples[5_000:, 0], fresh).pvalue > 0.01
