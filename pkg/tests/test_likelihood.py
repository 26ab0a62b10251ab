import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from bivarcar.likelihood import (
    GAMMA1_SUP,
    PC_ALPHA_MAX,
    SkewNormalSpec,
    alpha_of_gamma1,
    gamma1_of_alpha,
    log_gamma_prior_on_precision,
    pc_prior,
    pc_prior_alpha_logdensity,
    sn_derivs,
    sn_logpdf,
    sn_sample,
    sn_standardize,
)


def quad_moments(omega, alpha):
    spec = SkewNormalSpec.from_moments(omega, alpha)
    f = lambda x: math.exp(sn_logpdf(x, spec))
    lo, hi = spec.m - 40 * spec.s, spec.m + 40 * spec.s
    pts = [spec.m]
    kw = dict(points=pts, limit=400, epsabs=1e-13, epsrel=1e-13)
    mass = integrate.quad(f, lo, hi, **kw)[0]
    mean = integrate.quad(lambda x: x * f(x), lo, hi, **kw)[0]
    var = integrate.quad(lambda x: (x - mean) ** 2 * f(x), lo, hi, **kw)[0]
    return mass, mean, var


class TestStandardize:
    def test_symmetric_case(self):
        m, s = sn_standardize(4.0, 0.0)
        assert m == 0.0 and s == pytest.approx(2.0, abs=1e-15)

    def test_large_alpha_limit(self):
        m, s = sn_standardize(1.0, 1e9)
        assert s == pytest.approx(1 / math.sqrt(1 - 2 / math.pi), abs=1e-9)
        assert m == pytest.approx(-s * math.sqrt(2 / math.pi), abs=1e-12)
        # commonly quoted rounded values
        assert s == pytest.approx(1.65868, abs=1e-3)
        assert m == pytest.approx(-1.32340, abs=1e-3)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            sn_standardize(0.0, 1.0)

    @pytest.mark.parametrize("alpha", [-6.0, -0.5, 0.0, 2.0, 8.0])
    @pytest.mark.parametrize("omega", [0.3, 7.0])
    def test_quadrature_moments(self, alpha, omega):
        mass, mean, var = quad_moments(omega, alpha)
        assert abs(mass - 1) < 1e-8
        assert abs(mean) < 1e-8 * max(1.0, math.sqrt(omega))
        assert abs(var - omega) < 1e-8 * max(1.0, omega)

    @given(st.floats(-15, 15), st.floats(0.1, 200), st.integers(0, 2**31))
    def test_sample_moments(self, alpha, omega, seed):
        x = sn_sample(np.random.default_rng(seed), 100_000, SkewNormalSpec.from_moments(omega, alpha))
        se_mean = math.sqrt(omega / x.size)
        assert abs(x.mean()) < 3 * se_mean
        # sd of the sample variance: sqrt((mu4 - omega^2) / n), mu4 <= 3.87 omega^2
        se_var = math.sqrt(2.9 * omega**2 / x.size)
        assert abs(x.var() - omega) < 3 * se_var


class TestLogpdf:
    def test_alpha_zero_is_normal(self):
        x = np.linspace(-5, 5, 11)
        np.testing.assert_allclose(
            sn_logpdf(x, m=0.3, s=1.7, alpha=0.0), stats.norm(0.3, 1.7).logpdf(x), rtol=1e-13
        )

    def test_matches_scipy(self):
        x = np.linspace(-4, 4, 9)
        np.testing.assert_allclose(
            sn_logpdf(x, m=0.5, s=2.0, alpha=-3.0), stats.skewnorm(-3.0, 0.5, 2.0).logpdf(x), rtol=1e-12
        )

    def test_stable_far_tail(self):
        v = sn_logpdf(np.array([-60.0]), m=0.0, s=1.0, alpha=5.0)
        assert np.isfinite(v[0]) and v[0] < -1000

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            sn_logpdf(np.array([np.nan]), m=0, s=1, alpha=1)

    def test_sample_skewness(self):
        x = sn_sample(np.random.default_rng(0), 1_000_000, SkewNormalSpec.from_moments(1.0, 4.0))
        assert abs(stats.skew(x) - gamma1_of_alpha(4.0)) < 0.02

    @given(st.floats(-20, 20), st.floats(0.1, 50), st.floats(-30, 30))
    def test_mirror(self, alpha, omega, x):
        a = SkewNormalSpec.from_moments(omega, alpha)
        b = SkewNormalSpec.from_moments(omega, -alpha)
        assert sn_logpdf(x, a) == pytest.approx(float(sn_logpdf(-x, b)), abs=1e-12, rel=1e-12)

    @given(st.floats(-10, 10), st.floats(-5, 5))
    def test_derivatives(self, alpha, r):
        m, s = sn_standardize(2.0, alpha)
        h = 1e-5
        ll, d1, d2 = sn_derivs(np.array([r]), m, s, alpha)
        f = lambda t: float(sn_logpdf(t, m=m, s=s, alpha=alpha))
        assert ll[0] == pytest.approx(f(r), abs=1e-12)
        assert d1[0] == pytest.approx((f(r + h) - f(r - h)) / (2 * h), abs=1e-6)
        assert d2[0] == pytest.approx((f(r + h) - 2 * f(r) + f(r - h)) / h**2, abs=1e-3)


class TestGamma1:
    def test_values(self):
        assert gamma1_of_alpha(0.0) == 0.0
        # 2a^2 / (pi (1 + a^2)) = 1 / pi at a = 1
        u = 1 / math.pi
        assert gamma1_of_alpha(1.0) == pytest.approx((4 - math.pi) / 2 * (u / (1 - u)) ** 1.5, rel=1e-14)
        assert gamma1_of_alpha(1.0) == pytest.approx(0.1370, abs=1e-4)
        assert gamma1_of_alpha(1e8) == pytest.approx(0.99527, abs=1e-5)
        assert gamma1_of_alpha(-1.0) == -gamma1_of_alpha(1.0)

    def test_matches_scipy_skewness(self):
        for a in (-7.0, -0.3, 2.5):
            assert gamma1_of_alpha(a) == pytest.approx(float(stats.skewnorm(a).stats(moments="s")), rel=1e-10)

    def test_bound(self):
        a = np.concatenate([-np.logspace(-3, 6, 200), np.logspace(-3, 6, 200)])
        assert np.all(np.abs(gamma1_of_alpha(a)) < 0.99528)
        assert GAMMA1_SUP < 0.99528

    @given(st.floats(-0.97, 0.97))
    def test_inverse_round_trip(self, g):
        assert gamma1_of_alpha(alpha_of_gamma1(g)) == pytest.approx(g, abs=1e-8)

    def test_inverse_rejects_sup(self):
        with pytest.raises(ValueError):
            alpha_of_gamma1(0.996)


class TestPCPrior:
    def test_base_model_distance(self):
        assert pc_prior(4.0).distance(0.0) == 0.0

    def test_distance_monotone(self):
        pc = pc_prior(4.0)
        d = pc.distance(pc.grid)
        assert np.all(np.diff(d) > 0)

    def test_distance_matches_direct_kld(self):
        # KL of the standardised skew-normal from N(0, 1) by independent quadrature
        pc = pc_prior(4.0)
        for a in (0.5, 2.0, 10.0):
            m, s = sn_standardize(1.0, a)
            f = lambda x: math.exp(sn_logpdf(x, m=m, s=s, alpha=a))
            kl = integrate.quad(
                lambda x: f(x) * (math.log(f(x)) - stats.norm.logpdf(x)) if f(x) > 0 else 0.0,
                -30, 30, points=[m], limit=500,
            )[0]
            assert float(pc.distance(a)) == pytest.approx(math.sqrt(2 * kl), rel=1e-4)

    @pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
    @pytest.mark.parametrize("lam", [1.0, 4.0, 10.0])
    def test_integrates_to_one(self, lam):
        f = lambda a: math.exp(pc_prior_alpha_logdensity(a, lam))
        pts = [0.1, 0.5, 1, 2, 5]
        total = 2 * integrate.quad(f, 0, PC_ALPHA_MAX, points=pts, limit=400, epsabs=1e-8)[0]
        assert total == pytest.approx(1.0, abs=1e-4)

    def test_symmetric(self):
        a = np.linspace(0.1, 20, 17)
        np.testing.assert_allclose(pc_prior_alpha_logdensity(a), pc_prior_alpha_logdensity(-a))

    def test_inverse_distance(self):
        pc = pc_prior(4.0)
        for a in (-12.0, -1.0, 0.3, 4.0):
            t = math.copysign(float(pc.distance(a)), a)
            assert pc.alpha_of_distance(t) == pytest.approx(a, rel=1e-6)


class TestGammaPrior:
    def test_change_of_variables(self):
        # 1/omega ~ Gamma(a, b)  =>  density of v = log omega
        a, b = 2.0, 3.0
        v = np.linspace(-3, 3, 13)
        ref = stats.gamma(a, scale=1 / b).logpdf(np.exp(-v)) - v
        np.testing.assert_allclose(log_gamma_prior_on_precision(v, a, b), ref, rtol=1e-12)
