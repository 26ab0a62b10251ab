import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from bivarcar.criteria import (
    compute_bundle,
    cpo_lpml,
    dic,
    lppd_pointwise,
    predictive_mse,
    residual_kde,
    silverman_bandwidth,
    waic,
)


def normal_normal_ll(y, rng, S):
    """Draws of the pointwise log-likelihood for y_i ~ N(mu, 1), mu ~ N(0, 1)."""
    y = np.asarray(y, dtype=float)
    v = 1.0 / (y.size + 1)
    mu = rng.normal(v * y.sum(), math.sqrt(v), size=S)
    return stats.norm.logpdf(y[None, :], mu[:, None], 1.0)


class TestWaic:
    def test_identical_draws(self):
        ll = np.tile(np.array([-1.0, -2.5, -0.3]), (10, 1))
        r = waic(ll)
        assert r.p_waic == pytest.approx(0.0, abs=1e-12)
        assert r.waic == pytest.approx(-2 * ll[0].sum())

    def test_needs_two_draws(self):
        with pytest.raises(ValueError):
            waic(np.zeros((1, 4)))

    def test_conjugate_oracle(self):
        # y = 0, prior N(0, 1), unit error variance
        rng = np.random.default_rng(0)
        S = 4000
        reps = np.array([waic(normal_normal_ll([0.0], rng, S)).waic for _ in range(300)])
        oracle = waic(normal_normal_ll([0.0], np.random.default_rng(1), 1_000_000))
        est = waic(normal_normal_ll([0.0], np.random.default_rng(2), S)).waic
        assert abs(est - oracle.waic) < 3 * reps.std(ddof=1)
        # the exact value: lppd = log N(0; 0, 3/2), p_waic = var(mu^2 / 2) = 1/8
        exact = -2 * (stats.norm.logpdf(0, 0, math.sqrt(1.5)) - 0.125)
        assert oracle.waic == pytest.approx(exact, abs=3e-3)

    @given(st.floats(-50, 50), st.integers(0, 2**31))
    def test_constant_shift(self, c, seed):
        ll = np.random.default_rng(seed).normal(-2, 0.5, size=(200, 7))
        a, b = waic(ll), waic(ll + c)
        assert b.lppd == pytest.approx(a.lppd + 7 * c, abs=1e-9)
        assert b.p_waic == pytest.approx(a.p_waic, abs=1e-9)
        assert a.p_waic >= 0

    @given(st.integers(0, 2**31))
    def test_draw_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        ll = rng.normal(-1, 1, size=(300, 5))
        perm = rng.permutation(300)
        a, b = waic(ll), waic(ll[perm])
        assert a.waic == pytest.approx(b.waic, rel=1e-12)
        assert dic(ll, ll[0]).dic == pytest.approx(dic(ll[perm], ll[0]).dic, rel=1e-12)
        np.testing.assert_allclose(cpo_lpml(ll).log_cpo, cpo_lpml(ll[perm]).log_cpo, rtol=1e-12)

    def test_extreme_values_finite(self):
        ll = np.array([[-1e6, 1e6], [-1e6 + 1, 1e6 - 1], [-1e6 - 3, 1e6]])
        assert np.all(np.isfinite(lppd_pointwise(ll)))
        assert math.isfinite(waic(ll).waic)
        assert np.all(np.isfinite(cpo_lpml(ll).log_cpo))


class TestDic:
    def test_point_mass(self):
        ll = np.tile([-1.0, -3.0], (20, 1))
        r = dic(ll, ll[0])
        assert r.p_d == 0.0 and r.dic == r.expected_deviance

    def test_identity(self):
        ll = np.random.default_rng(0).normal(-1, 0.3, size=(50, 4))
        r = dic(ll, ll.mean(axis=0))
        assert r.dic == pytest.approx(r.expected_deviance + r.p_d)

    @pytest.mark.parametrize("q", [2, 5, 9])
    def test_flat_prior_linear_gaussian(self, q):
        rng = np.random.default_rng(q)
        n, sigma = 200, 1.5
        X = rng.standard_normal((n, q))
        y = X @ rng.standard_normal(q) + sigma * rng.standard_normal(n)
        XtX = X.T @ X
        bhat = np.linalg.solve(XtX, X.T @ y)
        B = rng.multivariate_normal(bhat, sigma**2 * np.linalg.inv(XtX), size=20000)
        ll = stats.norm.logpdf(y[None, :], B @ X.T, sigma)
        ll_bar = stats.norm.logpdf(y, X @ B.mean(axis=0), sigma)
        assert dic(ll, ll_bar).p_d == pytest.approx(q, rel=0.05)


class TestCpo:
    def test_exact_loo(self):
        y = np.array([0.3, -1.2, 0.8, 2.1, -0.4])
        exact = np.empty(5)
        for i in range(5):
            rest = np.delete(y, i)
            v = 1.0 / (rest.size + 1)
            exact[i] = stats.norm.logpdf(y[i], v * rest.sum(), math.sqrt(1 + v))
        rng = np.random.default_rng(0)
        S = 4000
        reps = np.array([cpo_lpml(normal_normal_ll(y, rng, S)).log_cpo for _ in range(200)])
        est = cpo_lpml(normal_normal_ll(y, np.random.default_rng(99), S))
        assert np.all(np.abs(est.log_cpo - exact) < 3 * reps.std(axis=0, ddof=1))
        assert est.n_flagged == 0
        assert est.neg_lpml == pytest.approx(-exact.sum(), abs=3 * reps.sum(axis=1).std(ddof=1))

    def test_exchangeable(self):
        ll = np.tile(np.random.default_rng(0).normal(-1, 0.4, size=(500, 1)), (1, 6))
        c = cpo_lpml(ll)
        assert np.ptp(c.log_cpo) == 0.0

    def test_outlier_flagged(self):
        rng = np.random.default_rng(3)
        y = rng.standard_normal(10)
        y[7] = 10.0
        # posterior under N(mu, 1), flat prior; the outlier's term has heavy ratios
        mu = rng.normal(y.mean(), 1 / math.sqrt(10), size=4000)
        ll = stats.norm.logpdf(y[None, :], mu[:, None], 1.0)
        c = cpo_lpml(ll)
        assert c.flags[7]
        assert c.n_flagged <= 2
        assert c.neg_lpml == pytest.approx(-c.log_cpo[~c.flags].sum())

    def test_cpo_bounded(self):
        ll = normal_normal_ll([0.1, 0.5], np.random.default_rng(0), 1000)
        c = cpo_lpml(ll)
        assert np.all(c.cpo > 0)
        assert np.all(c.log_cpo <= ll.max(axis=0) + 1e-12)


class TestMseKde:
    def test_perfect_fit(self):
        y = np.array([[1.0, 2.0], [3.0, np.nan]])
        assert predictive_mse(y, np.nan_to_num(y)) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            predictive_mse(np.zeros(3), np.zeros(4))

    def test_bandwidth_two_points(self):
        # sd = sqrt 2, IQR/1.34 = 1/1.34 (linear-interpolated quartiles -0.5, 0.5)
        h = silverman_bandwidth([-1.0, 1.0])
        assert h == pytest.approx(0.9 * min(math.sqrt(2), 1 / 1.34) * 2 ** (-0.2), rel=1e-14)

    def test_kde_integrates(self):
        r = np.random.default_rng(0).standard_normal(300) * 7
        k = residual_kde(r)
        assert k.grid.size == 512
        assert abs(k.integral() - 1) < 1e-6
        ref = stats.gaussian_kde(r, bw_method=k.bandwidth / r.std(ddof=1))
        np.testing.assert_allclose(k.density, ref(k.grid), rtol=1e-10)

    def test_kde_errors(self):
        with pytest.raises(ValueError):
            residual_kde([1.0])
        with pytest.raises(ValueError):
            residual_kde([2.0, 2.0, 2.0])


class TestBundle:
    def test_fields(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal(8)
        ll = normal_normal_ll(y, rng, 2000)
        b = compute_bundle(ll, stats.norm.logpdf(y, y.mean() * 8 / 9, 1), y, np.full(8, y.mean()))
        d = b.to_dict(pointwise=True)
        assert d["waic"] == pytest.approx(-2 * (d["lppd"] - d["p_waic"]))
        assert d["dic"] == pytest.approx(d["expected_deviance"] + d["p_d"])
        assert len(d["log_cpo"]) == 8 and d["draws"] == 2000
        assert 0 < d["p_d"] < 3
