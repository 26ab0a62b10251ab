import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bivarcar.deconfound import (
    PatternError,
    RemovalPattern,
    decompose_covariate,
    deconfounded_design,
    moran_i,
    search_moran_minimal,
    search_waic_optimal,
    standardize_moran,
    waic_scorer,
)
from bivarcar.graph import disjoint_union, eigendecompose, lattice_graph, path_graph
from bivarcar.inference import ModelSpec
from bivarcar.multilevel import aggregate, levelmap_from_graph
from bivarcar.simulate import Scenario, generate


def naive_moran(x, W):
    n = x.size
    xb = x.mean()
    num = sum(W[i, j] * (x[i] - xb) * (x[j] - xb) for i in range(n) for j in range(n))
    den = sum((x[i] - xb) ** 2 for i in range(n))
    return n / W.sum() * num / den


class TestMoran:
    def test_checkerboard(self):
        r = moran_i(np.array([1.0, -1, -1, 1]), lattice_graph(2, 2))
        assert r.I == pytest.approx(-1.0, abs=1e-14)
        assert r.E0 == pytest.approx(-1 / 3, abs=1e-15)

    def test_published_standardisation(self):
        # first table row; the full table is checked in the acceptance suite
        assert abs(standardize_moran(0.2705, -1 / 104, 0.00459) - 4.1338) < 5e-3

    def test_constant_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            moran_i(np.full(6, 3.0), path_graph(6))

    @given(st.integers(0, 2**31))
    def test_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g = lattice_graph(3, 4)
        x = rng.standard_normal(g.n)
        assert moran_i(x, g).I == pytest.approx(naive_moran(x, g.W), rel=1e-12)

    def test_null_moments_by_permutation(self):
        # under normality the null moments of I match a large Gaussian simulation
        g = lattice_graph(4, 5)
        rng = np.random.default_rng(1)
        X = rng.standard_normal((40000, g.n))
        D = X - X.mean(axis=1, keepdims=True)
        I = g.n / g.W.sum() * np.einsum("si,ij,sj->s", D, g.W, D) / np.sum(D * D, axis=1)
        r = moran_i(X[0], g)
        assert r.E0 == -1 / (g.n - 1)
        assert I.mean() == pytest.approx(r.E0, abs=4 * I.std() / 200)
        assert I.var() == pytest.approx(r.V0, rel=0.03)


def fiedler_plus_noise(g, c, scale, seed):
    eig = eigendecompose(g)
    v = eig.vectors[c][:, -2]
    rng = np.random.default_rng(seed)
    return 10 * v + scale * rng.standard_normal(g.n)


class TestDecompose:
    def test_zero_pattern(self):
        g = path_graph(6)
        x = np.arange(6.0) ** 2
        x_ns, x_s, x_0 = decompose_covariate(x, eigendecompose(g), [0])
        assert np.all(x_s == 0)
        np.testing.assert_allclose(x_0, x.mean())
        np.testing.assert_allclose(x_ns, x - x_0, atol=1e-12)

    def test_full_removal(self):
        g = disjoint_union(path_graph(5), path_graph(3))
        x = np.random.default_rng(0).standard_normal(8)
        x_ns, _, _ = decompose_covariate(x, eigendecompose(g), [4, 2])
        assert np.max(np.abs(x_ns)) < 1e-12

    def test_linear_trend_on_fiedler(self):
        x = np.arange(5.0) - 2.0
        x_ns, x_s, _ = decompose_covariate(x, eigendecompose(path_graph(5)), [1])
        assert np.linalg.norm(x_s) / np.linalg.norm(x) > 0.99

    def test_k_too_large(self):
        with pytest.raises(PatternError):
            decompose_covariate(np.arange(4.0), eigendecompose(path_graph(4)), [4])

    def test_explicit_positions(self):
        # a non-contiguous pattern on a 186-node component
        g = lattice_graph(6, 31)
        eig = eigendecompose(g)
        pos = (172,) + tuple(range(178, 187))
        x = np.random.default_rng(2).standard_normal(g.n)
        _, x_s, _ = decompose_covariate(x, eig, [pos])
        V = eig.vectors[0][:, [p - 1 for p in pos if p != 186]]
        np.testing.assert_allclose(x_s, V @ (V.T @ x), atol=1e-12)

    @given(st.integers(0, 2**31), st.data())
    def test_exact_and_orthogonal(self, seed, data):
        g = disjoint_union(lattice_graph(3, 4), path_graph(5), path_graph(3))
        eig = eigendecompose(g)
        ks = [data.draw(st.integers(0, s - 1)) for s in g.component_sizes]
        x = np.random.default_rng(seed).standard_normal(g.n) * 5
        x_ns, x_s, x_0 = decompose_covariate(x, eig, ks)
        assert np.max(np.abs(x_ns + x_s + x_0 - x)) < 1e-10
        for a, b in ((x_ns, x_s), (x_ns, x_0), (x_s, x_0)):
            assert abs(a @ b) < 1e-10

    @given(st.integers(0, 2**31))
    def test_monotone_smoothing(self, seed):
        g = path_graph(12)
        eig = eigendecompose(g)
        x = np.random.default_rng(seed).standard_normal(g.n)
        norms = [np.linalg.norm(decompose_covariate(x, eig, [K])[0]) for K in range(12)]
        assert np.all(np.diff(norms) <= 1e-12)


@pytest.fixture(scope="module")
def setup():
    g = disjoint_union(lattice_graph(3, 4), path_graph(4))
    rng = np.random.default_rng(8)
    areas = np.repeat(np.arange(g.n), 3)
    lm = levelmap_from_graph(areas, g)
    X = rng.standard_normal((areas.size, 2)) + np.repeat(rng.standard_normal((g.n, 2)), 3, axis=0)
    cov = aggregate(X, lm, ("a", "b"))
    return g, lm, cov, eigendecompose(g)


class TestDesign:
    def test_zero_pattern_removes_component_means(self, setup):
        g, lm, cov, eig = setup
        out = deconfounded_design(cov, lm, eig, RemovalPattern.zeros(cov.names, g.G), rescale=False)
        Xbar0 = np.zeros_like(cov.Xbar)
        for c in range(g.G):
            idx = g.members(c)
            Xbar0[idx] = cov.Xbar[idx].mean(axis=0)
        np.testing.assert_allclose(out, lm.xi @ (cov.Xbar - Xbar0) + cov.DeltaX, atol=1e-12)

    def test_rescale_keeps_sd(self, setup):
        g, lm, cov, eig = setup
        pat = RemovalPattern(counts={"a": (3, 1), "b": (0, 2)})
        out = deconfounded_design(cov, lm, eig, pat, rescale=True)
        np.testing.assert_allclose(out.std(axis=0, ddof=1), cov.X.std(axis=0, ddof=1), rtol=1e-10)

    def test_published_pattern_shape(self):
        g = disjoint_union(lattice_graph(7, 13), path_graph(9), path_graph(5))
        pat = RemovalPattern(
            counts={"central": (5, 1, 1), "peripheral": (4, 1, 1), "bb": (5, 1, 1), "transport": (0, 0, 0)}
        )
        eig = eigendecompose(g)
        x = np.random.default_rng(0).standard_normal(g.n)
        for name in pat.counts:
            _, x_s, _ = decompose_covariate(x, eig, pat.row(name, 3))
            # the spatial part spans exactly the removed eigenvectors
            coef = np.concatenate([eig.vectors[c].T @ x_s for c in range(3)])
            assert int(np.sum(np.abs(coef) > 1e-10)) == sum(pat.counts[name])


class TestMoranSearch:
    def test_uncorrelated_gives_zero(self):
        g = lattice_graph(5, 6)
        lm = levelmap_from_graph(np.arange(g.n), g)
        # an alternating pattern is negatively autocorrelated
        x = np.array([(-1.0) ** (i + j) for i in range(5) for j in range(6)])
        cov = aggregate(x[:, None], lm, ("x",))
        pat = search_moran_minimal(cov, g, eigendecompose(g))
        assert pat.counts["x"] == (0,)

    def test_fiedler_removed(self):
        g = path_graph(30)
        lm = levelmap_from_graph(np.arange(30), g)
        x = fiedler_plus_noise(g, 0, 0.3, 4)
        cov = aggregate(x[:, None], lm, ("x",))
        eig = eigendecompose(g)
        assert moran_i(x, g).I_std > 1.645
        pat = search_moran_minimal(cov, g, eig)
        assert pat.counts["x"] == (1,)
        x_ns, _, _ = decompose_covariate(x, eig, [1])
        assert moran_i(x_ns, g).I_std < 1.645
        assert pat.achieved["x"] == pytest.approx(moran_i(x_ns, g).I_std)

    def test_caps_and_warning(self):
        g = path_graph(30)
        lm = levelmap_from_graph(np.arange(30), g)
        x = np.arange(30.0) ** 1.5
        cov = aggregate(x[:, None], lm, ("x",))
        with pytest.warns(UserWarning):
            pat = search_moran_minimal(cov, g, eigendecompose(g), threshold=-5.0 + 5.000001, caps=(1,))
        assert pat.counts["x"] == (1,) and pat.flags

    def test_continent_first(self):
        g = disjoint_union(lattice_graph(4, 5), path_graph(6))
        lm = levelmap_from_graph(np.arange(g.n), g)
        eig = eigendecompose(g)
        x = 10 * eig.vectors[1][:, -2] + 10 * eig.vectors[0][:, -2]
        x = x + 0.2 * np.random.default_rng(1).standard_normal(g.n)
        pat = search_moran_minimal(aggregate(x[:, None], lm, ("x",)), g, eig)
        k0, k1 = pat.counts["x"]
        assert k0 >= k1 and k0 >= 1

    def test_bad_threshold(self):
        g = path_graph(4)
        cov = aggregate(np.arange(4.0)[:, None], levelmap_from_graph(range(4), g))
        with pytest.raises(ValueError):
            search_moran_minimal(cov, g, eigendecompose(g), threshold=0)


class TestWaicSearch:
    def test_matches_enumeration(self):
        table = {0: 3.0, 1: 1.5, 2: 2.0}
        score = lambda p: table[p.counts["x"][0]]
        res = search_waic_optimal(score, ["x"], caps=(2,))
        brute = min(table, key=table.get)
        assert res.pattern.counts["x"] == (brute,)
        ex = search_waic_optimal(score, ["x"], caps=(2,), exhaustive=True)
        assert ex.pattern.counts == res.pattern.counts

    def test_caps_respected(self):
        score = lambda p: -float(p.total())
        res = search_waic_optimal(score, ["a", "b"], caps=(9, 1, 1))
        for v in res.pattern.counts.values():
            assert v[0] <= 9 and v[1] <= 1 and v[2] <= 1

    def test_budget_flag(self):
        score = lambda p: -float(p.total())
        res = search_waic_optimal(score, ["a", "b"], caps=(5,), budget=4)
        assert res.exhausted and res.evaluations <= 4

    def test_ties_prefer_smaller_k(self):
        res = search_waic_optimal(lambda p: 1.0, ["a"], caps=(3,))
        assert res.pattern.counts["a"] == (0,)

    def test_local_optimum_with_fits(self):
        sim = generate(Scenario(seed=5, graph="lattice:2x5", n_per_area=8, covariates=("normal",), beta=((3.0,), (2.0,))))
        data = sim.dataset()
        spec = ModelSpec(likelihoods=("gaussian", "skew_normal"))
        score = waic_scorer(spec, data, seed=0, draws=1000, hyper_draws=2000)
        res = search_waic_optimal(score, ["x1"], caps=(2,), budget=10)
        K = res.pattern.counts["x1"][0]
        for Kn in {max(K - 1, 0), min(K + 1, 2)} - {K}:
            assert res.waic <= score(res.pattern.with_count("x1", 0, Kn))
