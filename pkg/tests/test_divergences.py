import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from warpu.divergences import harmonic_divergence, pearson_chi2
from warpu.errors import InputError


def norm_logpdf(mu, sd):
    return lambda x: norm.logpdf(np.atleast_2d(x)[:, 0], mu, sd)


class TestHarmonicDivergence:
    def test_identical_densities(self):
        # oracle: with eta_1 = eta_2 = 1/2 the integrand reduces to the
        # density itself, so the overlap integral is 1 and the divergence 0
        est = harmonic_divergence(norm_logpdf(0, 1), norm_logpdf(0, 1), 1)
        assert est.value == pytest.approx(0.0, abs=1e-8)

    def test_disjoint_supports(self):
        def boxcar(lo, hi):
            def f(x):
                x = np.atleast_2d(x)[:, 0]
                return np.where((x > lo) & (x < hi), -np.log(hi - lo), -np.inf)
            return f

        est = harmonic_divergence(boxcar(0, 1), boxcar(2, 3), 1)
        assert est.value == pytest.approx(1.0, abs=1e-9)

    def test_two_normals_vs_quadrature_oracle(self):
        # independent oracle: direct quadrature of the harmonic integrand
        s1 = s2 = 0.5
        eta1, eta2 = s2, s1

        def integrand(x):
            p1 = norm.pdf(x, 0, 1)
            p2 = norm.pdf(x, 3, 1)
            return 1.0 / (eta1 / p1 + eta2 / p2)

        oracle, _ = integrate.quad(integrand, -15, 20, limit=300)
        est = harmonic_divergence(norm_logpdf(0, 1), norm_logpdf(3, 1), 1)
        assert est.value == pytest.approx(1.0 - oracle, abs=1e-8)
        assert 0.0 < est.value < 1.0

    def test_unequal_fractions_oracle(self):
        s1, s2 = 0.8, 0.2
        eta1, eta2 = s2, s1  # proportional to 1/s_i, normalized

        def integrand(x):
            p1 = norm.pdf(x, 0, 1)
            p2 = norm.pdf(x, 1.5, 1)
            return 1.0 / (eta1 / p1 + eta2 / p2)

        oracle, _ = integrate.quad(integrand, -12, 14, limit=300)
        est = harmonic_divergence(norm_logpdf(0, 1), norm_logpdf(1.5, 1),
                                  1, s1=s1, s2=s2)
        assert est.value == pytest.approx(1.0 - oracle, abs=1e-8)

    def test_bad_fractions(self):
        with pytest.raises(InputError):
            harmonic_divergence(norm_logpdf(0, 1), norm_logpdf(0, 1), 1,
                                s1=0.7, s2=0.7)

    def test_monte_carlo_path_with_se(self):
        d = 4

        def lp(mu):
            return lambda x: -0.5 * np.sum((np.atleast_2d(x) - mu) ** 2, axis=1) \
                - 0.5 * d * np.log(2 * np.pi)

        rng = np.random.default_rng(5)
        est = harmonic_divergence(
            lp(0.0), lp(0.5), d,
            sampler1=lambda r, n: r.standard_normal((n, d)), rng=rng,
            n_mc=100_000,
        )
        assert est.method == "mc"
        assert est.se is not None and est.se < 0.01
        # independent oracle: plain Monte Carlo with a different stream
        draws = np.random.default_rng(7).standard_normal((200_000, d))
        lp1 = lp(0.0)(draws)
        lp2 = lp(0.5)(draws)
        g = np.exp(lp2 - np.logaddexp(np.log(0.5) + lp2, np.log(0.5) + lp1))
        direct = 1.0 - g.mean()
        tol = 4 * est.se + 4 * g.std(ddof=1) / np.sqrt(g.size)
        assert est.value == pytest.approx(direct, abs=tol)


class TestPearsonChi2:
    def test_identical_densities(self):
        est = pearson_chi2(norm_logpdf(0, 1), norm_logpdf(0, 1), 1)
        assert est.value == pytest.approx(0.0, abs=1e-10)

    def test_gaussian_closed_form(self):
        # oracle: shifted-normal divergence has closed form exp(mu^2) - 1
        mu = 0.5
        est = pearson_chi2(norm_logpdf(0, 1), norm_logpdf(mu, 1), 1)
        assert est.value == pytest.approx(np.exp(mu**2) - 1.0, rel=1e-8)
        assert np.exp(mu**2) - 1.0 == pytest.approx(0.28402541668774148, abs=1e-15)

    def test_transported_mixture_target_is_zero(self, trimodal, trimodal_mix):
        from warpu.density import std_normal_logpdf, warped_log_density_batch

        est = pearson_chi2(
            lambda x: std_normal_logpdf(np.atleast_2d(x)),
            lambda x: warped_log_density_batch(
                trimodal_mix, trimodal.target, np.atleast_2d(x)),
            1,
        )
        assert est.value == pytest.approx(0.0, abs=1e-8)

    def test_heavy_tail_flagged_divergent(self):
        # ratio t/normal makes the integral genuinely infinite
        from scipy.stats import t as student_t

        est = pearson_chi2(
            norm_logpdf(0, 1),
            lambda x: student_t.logpdf(np.atleast_2d(x)[:, 0], 4),
            1,
        )
        assert not est.stable
        assert est.value == np.inf

    def test_monte_carlo_path(self):
        d = 3

        def lp(mu, sd=1.0):
            return lambda x: (
                -0.5 * np.sum(((np.atleast_2d(x) - mu) / sd) ** 2, axis=1)
                - d * np.log(sd) - 0.5 * d * np.log(2 * np.pi)
            )

        est = pearson_chi2(
            lp(0.0), lp(0.2), d,
            sampler_ref=lambda r, n: r.standard_normal((n, d)),
            rng=np.random.default_rng(3), n_mc=400_000,
        )
        # closed form in d dimensions: exp(d mu^2) - 1 for unit variances
        truth = np.exp(d * 0.2**2) - 1.0
        assert est.method == "mc"
        assert est.value == pytest.approx(truth, abs=5 * est.se)
