import numpy as np
import pytest
from scipy import integrate
from scipy.stats import ks_2samp, norm

from warpu.density import (
    GaussianMixture,
    TargetDensity,
    check_simplex,
    component_warped_log_density,
    component_warped_log_density_batch,
    inverse_index_distribution,
    mass_transport_decomposition,
    std_normal_logpdf,
    transport_batch,
    warped_log_density,
    warped_log_density_batch,
)
from warpu.errors import DegenerateStateError, InputError, NumericError
from warpu.rngs import derive_rng
from warpu.targets import trimodal_1d


def normal_pdf(x, mu, sd):
    return np.exp(-0.5 * ((x - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))


class TestMixtureDensity:
    def test_standard_normal_at_mode(self):
        mix = GaussianMixture([1.0], [[0.0]], np.array([[[1.0]]]))
        assert mix.log_density(np.array([0.0])) == pytest.approx(
            np.log(1 / np.sqrt(2 * np.pi)), abs=1e-12
        )

    def test_symmetric_pair_at_midpoint(self):
        # doubling and halving cancel: value equals a single normal at distance 1
        mix = GaussianMixture([0.5, 0.5], [[-1.0], [1.0]],
                              np.array([1.0, 1.0]).reshape(2, 1, 1))
        assert mix.log_density(np.array([0.0])) == pytest.approx(
            np.log(normal_pdf(1.0, 0.0, 1.0)), abs=1e-12
        )

    def test_two_component_hand_value(self):
        # oracle: explicit sum of two normal pdfs at theta=1
        mix = GaussianMixture([0.3, 0.7], [[0.0], [3.0]],
                              np.array([1.0, 2.0]).reshape(2, 1, 1))
        expected = 0.3 * normal_pdf(1.0, 0.0, 1.0) + 0.7 * normal_pdf(1.0, 3.0, 2.0)
        assert mix.log_density(np.array([1.0])) == pytest.approx(
            np.log(expected), abs=1e-12
        )
        assert expected == pytest.approx(0.15728097093744317, abs=1e-15)

    def test_dimension_mismatch(self):
        mix = GaussianMixture([1.0], [[0.0, 0.0]], np.array([np.eye(2)]))
        with pytest.raises(InputError):
            mix.log_density_batch(np.zeros((3, 3)))

    def test_weights_must_sum_to_one(self):
        with pytest.raises(InputError):
            GaussianMixture([0.5, 0.6], [[-1.0], [1.0]],
                            np.array([1.0, 1.0]).reshape(2, 1, 1))

    def test_zero_diagonal_scale_rejected(self):
        with pytest.raises(NumericError):
            GaussianMixture([1.0], [[0.0]], np.array([[[0.0]]]))

    def test_never_minus_inf_for_finite_input(self):
        mix = GaussianMixture([1.0], [[0.0]], np.array([[[1.0]]]))
        assert np.isfinite(mix.log_density(np.array([40.0])))


class TestResponsibilities:
    def test_single_component(self):
        mix = GaussianMixture([1.0], [[0.0]], np.array([[[1.0]]]))
        np.testing.assert_allclose(mix.responsibilities(np.array([2.3])), [1.0])

    def test_symmetric_midpoint(self, pair_mix_1d):
        np.testing.assert_allclose(
            pair_mix_1d.responsibilities(np.array([0.0])), [0.5, 0.5], atol=1e-14
        )

    def test_hand_ratio_at_one(self, pair_mix_1d):
        # phi(2)/phi(0) = exp(-2); responsibilities are (r, 1)/(1+r)
        r = np.exp(-2.0)
        expected = np.array([r / (1 + r), 1 / (1 + r)])
        got = pair_mix_1d.responsibilities(np.array([1.0]))
        np.testing.assert_allclose(got, expected, rtol=1e-12)
        np.testing.assert_allclose(
            expected, [0.11920292202211755, 0.8807970779778824], rtol=1e-15
        )

    def test_simplex_property_random(self, trimodal_mix):
        rng = derive_rng(7)
        for x in rng.uniform(-10, 10, size=50):
            p = trimodal_mix.responsibilities(np.array([x]))
            check_simplex(p, tol=1e-10)


class TestWarps:
    def test_identity_mixture(self):
        mix = GaussianMixture([1.0], [[0.0, 0.0]], np.array([np.eye(2)]))
        theta = np.array([1.2, -0.7])
        np.testing.assert_allclose(mix.forward_warp(theta, 1), theta)

    def test_affine_arithmetic(self):
        mix = GaussianMixture([1.0], [[1.0]], np.array([[[2.0]]]))
        np.testing.assert_allclose(mix.forward_warp(np.array([3.0]), 1), [1.0])
        np.testing.assert_allclose(mix.inverse_warp(np.array([1.0]), 1), [3.0])

    def test_round_trip_random(self):
        rng = derive_rng(3)
        for _ in range(10):
            d = int(rng.integers(1, 5))
            k = int(rng.integers(1, 4))
            scales = []
            for _ in range(k):
                a = rng.standard_normal((d, d))
                scales.append(np.linalg.cholesky(a @ a.T + np.eye(d)))
            mix = GaussianMixture(
                rng.dirichlet(np.ones(k)), rng.standard_normal((k, d)),
                np.array(scales),
            )
            for _ in range(100):
                theta = rng.standard_normal(d) * 5
                psi = int(rng.integers(1, k + 1))
                back = mix.inverse_warp(mix.forward_warp(theta, psi), psi)
                np.testing.assert_allclose(back, theta, atol=1e-12)

    def test_same_index_composition_is_identity(self, trimodal_mix):
        theta = np.array([2.5])
        for psi in (1, 2, 3):
            star = trimodal_mix.forward_warp(theta, psi)
            np.testing.assert_allclose(
                trimodal_mix.inverse_warp(star, psi), theta, atol=1e-12
            )

    def test_bad_index(self, trimodal_mix):
        with pytest.raises(InputError):
            trimodal_mix.forward_warp(np.array([0.0]), 4)


class TestInverseIndexDistribution:
    def test_single_component(self):
        mix = GaussianMixture([1.0], [[0.0]], np.array([[[1.0]]]))
        tgt = TargetDensity(1, lambda th: -0.5 * float(th @ th))
        nu = inverse_index_distribution(mix, tgt, np.array([0.3]))
        np.testing.assert_allclose(nu.probs, [1.0])

    def test_target_equals_mixture_gives_weights(self, trimodal, trimodal_mix):
        # brute-force check of the algebraic simplification at random points
        rng = derive_rng(11)
        for _ in range(20):
            star = rng.standard_normal(1) * 2
            nu = inverse_index_distribution(trimodal_mix, trimodal.target, star)
            np.testing.assert_allclose(nu.probs, trimodal_mix.weights, rtol=1e-10)

    def test_matches_literal_selection_formula(self, trimodal_mix):
        # responsibility at the back-map, times target mass, times volume factor
        bt = trimodal_1d(scale=3.7)
        rng = derive_rng(13)
        for _ in range(100):
            star = rng.standard_normal(1) * 3
            nu = inverse_index_distribution(trimodal_mix, bt.target, star)
            literal = np.empty(3)
            for psi in (1, 2, 3):
                h = trimodal_mix.inverse_warp(star, psi)
                resp = trimodal_mix.responsibilities(h)[psi - 1]
                literal[psi - 1] = (
                    resp * np.exp(bt.target.log_q(h))
                    * np.exp(trimodal_mix.log_det_scales[psi - 1])
                )
            literal /= literal.sum()
            np.testing.assert_allclose(nu.probs, literal, rtol=1e-10)

    def test_proportional_to_weighted_component_density(self, trimodal, trimodal_mix):
        rng = derive_rng(17)
        for _ in range(100):
            star = rng.standard_normal(1) * 2.5
            nu = inverse_index_distribution(trimodal_mix, trimodal.target, star)
            ref = np.array([
                trimodal_mix.weights[k - 1] * np.exp(
                    component_warped_log_density(trimodal_mix, trimodal.target, star, k)
                )
                for k in (1, 2, 3)
            ])
            np.testing.assert_allclose(nu.probs, ref / ref.sum(), rtol=1e-10)

    def test_exactly_k_evaluations_and_cache(self, trimodal, trimodal_mix):
        before = trimodal.target.eval_count
        nu = inverse_index_distribution(trimodal_mix, trimodal.target, np.array([0.1]))
        assert trimodal.target.eval_count - before == 3
        assert nu.log_q.shape == (3,)
        assert nu.states.shape == (3, 1)
        # cached values match direct evaluation
        np.testing.assert_allclose(
            nu.log_q, trimodal.target.log_q_batch(nu.states), atol=0
        )

    def test_degenerate_state_error(self, trimodal_mix):
        compact = TargetDensity(
            1, lambda th: 0.0 if abs(th[0] - 100.0) < 0.5 else -np.inf
        )
        with pytest.raises(DegenerateStateError):
            inverse_index_distribution(trimodal_mix, compact, np.array([0.0]))


class TestWarpedDensity:
    def test_target_equal_mixture_gives_standard_normal(self, trimodal, trimodal_mix):
        for star in (-1.3, 0.0, 2.2):
            got = warped_log_density(trimodal_mix, trimodal.target, np.array([star]))
            assert got == pytest.approx(std_normal_logpdf(np.array([star])), abs=1e-10)

    def test_single_component_exact_standardization(self):
        mix = GaussianMixture([1.0], [[2.0]], np.array([[[1.5]]]))
        c = 4.2
        tgt = TargetDensity(
            1, lambda th: np.log(c) + float(norm.logpdf(th[0], 2.0, 1.5))
        )
        star = np.array([0.8])
        assert warped_log_density(mix, tgt, star) == pytest.approx(
            np.log(c) + std_normal_logpdf(star), abs=1e-12
        )

    def test_integral_preserved_1d(self, trimodal, trimodal_mix):
        # quadrature oracle: transported mass equals the original mass
        total_q, _ = integrate.quad(
            lambda t: np.exp(trimodal.target.log_q(np.array([t]))), -30, 30,
            limit=300,
        )
        total_warped, _ = integrate.quad(
            lambda t: np.exp(
                warped_log_density(trimodal_mix, trimodal.target, np.array([t]))
            ),
            -20, 20, limit=300,
        )
        assert total_warped == pytest.approx(total_q, abs=1e-6)
        assert total_q == pytest.approx(1.0, abs=1e-9)

    def test_component_constants_recombine(self, trimodal, trimodal_mix):
        # per-component mass, weighted by mixture weights, recovers the total
        cks = []
        for k in (1, 2, 3):
            val, _ = integrate.quad(
                lambda t, k=k: np.exp(component_warped_log_density(
                    trimodal_mix, trimodal.target, np.array([t]), k)),
                -20, 20, limit=300,
            )
            cks.append(val)
        assert np.dot(trimodal_mix.weights, cks) == pytest.approx(1.0, abs=1e-7)

    def test_weighted_components_sum_to_full_density(self, trimodal, trimodal_mix):
        star = np.array([0.7])
        full = np.exp(warped_log_density(trimodal_mix, trimodal.target, star))
        parts = sum(
            trimodal_mix.weights[k - 1] * np.exp(component_warped_log_density(
                trimodal_mix, trimodal.target, star, k))
            for k in (1, 2, 3)
        )
        assert parts == pytest.approx(full, rel=1e-12)

    def test_batch_agrees_with_scalar(self, trimodal, trimodal_mix):
        stars = derive_rng(23).standard_normal((40, 1))
        batch = warped_log_density_batch(trimodal_mix, trimodal.target, stars)
        single = [warped_log_density(trimodal_mix, trimodal.target, s) for s in stars]
        np.testing.assert_allclose(batch, single, rtol=1e-12)


class TestMassTransport:
    def test_entries_sum_to_q(self, trimodal, trimodal_mix):
        rng = derive_rng(29)
        for _ in range(200):
            theta = np.array([rng.uniform(-10, 10)])
            m = mass_transport_decomposition(trimodal_mix, trimodal.target, theta)
            q = np.exp(trimodal.target.log_q(theta))
            assert m.sum() == pytest.approx(q, rel=1e-8)
            assert np.all(m >= 0)

    def test_single_component_equals_q(self):
        mix = GaussianMixture([1.0], [[0.5]], np.array([[[1.3]]]))
        tgt = TargetDensity(1, lambda th: -0.5 * float(th @ th))
        theta = np.array([0.4])
        m = mass_transport_decomposition(mix, tgt, theta)
        assert m.shape == (1, 1)
        assert m[0, 0] == pytest.approx(np.exp(tgt.log_q(theta)), rel=1e-12)

    def test_source_curves_nonnegative_and_sum_to_q(self, trimodal, trimodal_mix):
        # column sums are the per-source transported densities on a grid
        for theta in np.linspace(-8, 8, 9):
            m = mass_transport_decomposition(
                trimodal_mix, trimodal.target, np.array([theta])
            )
            source = m.sum(axis=0)
            assert np.all(source >= 0)
            assert source.sum() == pytest.approx(
                np.exp(trimodal.target.log_q(np.array([theta]))), rel=1e-8
            )


class TestDistributionPreservation:
    @pytest.mark.parametrize("mix_fixture", ["trimodal_mix", "mismatched_mix"])
    def test_transport_preserves_law(self, request, trimodal, mix_fixture):
        # well-matched and deliberately mismatched mixtures both preserve the law
        mix = request.getfixturevalue(mix_fixture)
        rng = derive_rng(31)
        draws = trimodal.sampler(rng, 20_000)
        moved, _, _ = transport_batch(mix, trimodal.target, draws, rng)
        fresh = trimodal.sampler(rng, 20_000)
        assert ks_2samp(moved[:, 0], fresh[:, 0]).pvalue > 0.01

    def test_transport_changes_indices(self, trimodal, trimodal_mix):
        rng = derive_rng(37)
        draws = trimodal.sampler(rng, 5_000)
        _, psi, psi_prime = transport_batch(trimodal_mix, trimodal.target, draws, rng)
        assert np.mean(psi != psi_prime) > 0.2  # mass actually swaps between modes


class TestTargetDensity:
    def test_eval_count_thread_safe(self, trimodal):
        import threading

        target = trimodal.target
        start = target.eval_count
        point = np.array([0.0])

        def work():
            for _ in range(200):
                target.log_q(point)

        threads = [threading.Thread(target=work) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert target.eval_count - start == 1600

    def test_batch_counts_per_point(self, trimodal):
        start = trimodal.target.eval_count
        trimodal.target.log_q_batch(np.zeros((17, 1)))
        assert trimodal.target.eval_count - start == 17

    def test_nan_rejected(self):
        tgt = TargetDensity(1, lambda th: float("nan"))
        with pytest.raises(NumericError):
            tgt.log_q(np.array([0.0]))
