import json
import math

import numpy as np
import pytest

from dyntree import Cloud, ConstantLeaf, MultinomialLeaf
from dyntree.design import (
    DesignAborted,
    DesignConfig,
    active_learn_loop,
    alc_statistic,
    alm_statistic,
    ei_student,
    entropy_statistic,
    expected_improvement,
    g_statistic,
    lhs,
    mean_sd,
    optimize_loop,
    substream,
    y_min_hat,
)
from dyntree.tree import make_leaf


def stats_cloud(stats_list, d=1):
    """A constant-leaf cloud whose particles are root leaves with the given stats."""
    c = Cloud.from_arrays(np.arange(5.0 * d).reshape(5, d), np.arange(5.0), ConstantLeaf(d),
                          n_particles=len(stats_list))
    m = c.model
    c.particles = [make_leaf(0, np.arange(5), np.asarray(s, float), m.log_marginal(np.asarray(s, float)), c.prior)
                   for s in stats_list]
    return c


def const_stats(n, mean, ss):
    return [n, mean, ss, ss + n * mean * mean]


class TestLhs:
    def test_strata_1d(self):
        x = lhs(4, [(0, 1)], np.random.default_rng(0))[:, 0]
        assert sorted(np.floor(x * 4).astype(int).tolist()) == [0, 1, 2, 3]

    def test_projection_3d(self):
        X = lhs(10, [(0, 1), (-5, 5), (2, 3)], np.random.default_rng(1))
        lo = np.array([0, -5, 2])
        w = np.array([1, 10, 1]) / 10
        for j in range(3):
            assert sorted(np.floor((X[:, j] - lo[j]) / w[j]).astype(int).tolist()) == list(range(10))

    def test_deterministic(self):
        a = lhs(7, [(0, 1)] * 2, substream(3, "lhs"))
        b = lhs(7, [(0, 1)] * 2, substream(3, "lhs"))
        np.testing.assert_array_equal(a, b)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            lhs(0, [(0, 1)], np.random.default_rng(0))
        with pytest.raises(ValueError):
            lhs(3, [(1, 0)], np.random.default_rng(0))


class TestExpectedImprovement:
    def test_at_location(self):
        assert ei_student(0.0, 1.0, 3.0, 0.0) == pytest.approx(0.551329, abs=1e-6)

    def test_tails(self):
        assert ei_student(1e6, 1.0, 3.0, 0.0) < 1e-3
        assert ei_student(-1e6, 1.0, 3.0, 0.0) == pytest.approx(1e6, rel=1e-6)

    def test_nonnegative_and_decreasing(self):
        a = np.linspace(-20, 20, 401)
        for b in (0.01, 1.0, 9.0):
            for c in (1.5, 3.0, 30.0):
                e = ei_student(a, b, c, 0.0)
                assert np.all(e >= 0)
                assert np.all(np.diff(e) <= 1e-12)

    def test_undefined_df(self):
        assert math.isnan(ei_student(0.0, 1.0, 1.0, 0.0))

    def test_mc_small(self):
        rng = np.random.default_rng(2)
        a, b, c, ym = 0.3, 2.0, 4.0, 1.0
        y = a + math.sqrt(b) * rng.standard_t(c, 400_000)
        imp = np.maximum(ym - y, 0)
        assert abs(ei_student(a, b, c, ym) - imp.mean()) <= 3 * imp.std() / math.sqrt(imp.size)

    def test_single_particle(self):
        c = stats_cloud([const_stats(5, 1.0, 4.0)])
        t = c.model.mean_posterior(c.particles[0].stats)
        ei = expected_improvement(c, np.zeros((1, 1)), 0.5)
        assert ei[0] == pytest.approx(ei_student(t.a, t.b, t.c, 0.5))


class TestYMin:
    def test_constant_root(self):
        c = stats_cloud([const_stats(5, 1.7, 4.0)])
        assert y_min_hat(c, np.array([[123.0]])) == pytest.approx(1.7)

    def test_monotone(self, rng):
        X = rng.random((40, 1))
        c = Cloud.from_arrays(X[:5], np.sin(6 * X[:5, 0]), ConstantLeaf(), n_particles=50)
        c.run(X[5:], np.sin(6 * X[5:, 0]))
        R = rng.random((30, 1))
        vals = [y_min_hat(c, R[:k]) for k in range(1, 31)]
        assert np.all(np.diff(vals) <= 1e-12)
        assert vals[0] == pytest.approx(c.predict_mean(R[:1])[0])
        with pytest.raises(ValueError):
            y_min_hat(c, np.empty((0, 1)))


class TestG:
    def test_single_particle_sd(self):
        c = stats_cloud([const_stats(6, 0.0, 4.0)])
        t = c.model.mean_posterior(c.particles[0].stats)
        assert mean_sd(c, np.zeros((1, 1)))[0] == pytest.approx(math.sqrt(t.b * t.c / (t.c - 2)))

    def test_two_particle_decomposition(self):
        # mean-posterior variance s2/(n(n-1)) * (n-1)/(n-3) = s2/(n(n-3)); n=5 gives s2/10
        c = stats_cloud([const_stats(5, 0.0, 10.0), const_stats(5, 2.0, 10.0)])
        assert mean_sd(c, np.zeros((1, 1)))[0] ** 2 == pytest.approx(2.0)

    def test_phi_limit(self, rng):
        X = rng.random((60, 1))
        y = X[:, 0] ** 2 + 0.1 * rng.standard_normal(60)
        c = Cloud.from_arrays(X[:5], y[:5], ConstantLeaf(), n_particles=40)
        c.run(X[5:], y[5:])
        Xc = rng.random((50, 1))
        ym = y_min_hat(c, Xc)
        # averaged over particles where each term is defined
        ei = expected_improvement(c, Xc, ym, partial=True)
        g = g_statistic(c, Xc, 1e12, ym, partial=True)
        ok = np.isfinite(g)
        assert ok.sum() > 25
        np.testing.assert_allclose(g[ok], ei[ok], atol=1e-9)
        ei_ok = np.where(ok, ei, np.nan)
        assert np.nanargmax(g_statistic(c, Xc, 1e9, ym, partial=True)) == np.nanargmax(ei_ok)
        with pytest.raises(ValueError):
            g_statistic(c, Xc, 0.0, ym)


class TestAlm:
    def test_single(self):
        c = stats_cloud([const_stats(5, 0.0, 4.0)])
        assert alm_statistic(c, np.zeros((1, 1)))[0] == pytest.approx(2.4)

    def test_identical_particles(self):
        c = stats_cloud([const_stats(5, 0.0, 4.0)] * 3)
        assert alm_statistic(c, np.zeros((2, 1))) == pytest.approx([2.4, 2.4])

    def test_undefined(self):
        c = stats_cloud([const_stats(3, 0.0, 4.0)])
        assert np.isnan(alm_statistic(c, np.zeros((1, 1)))[0])

    def test_matches_sampling(self):
        rng = np.random.default_rng(4)
        c = stats_cloud([const_stats(8, 0.0, 3.0), const_stats(20, 1.5, 30.0), const_stats(9, -1.0, 1.0)])
        A, B, C, w = c.components(np.zeros((1, 1)))
        k = rng.choice(3, size=1_000_000, p=w)
        y = A[k, 0] + np.sqrt(B[k, 0]) * rng.standard_t(C[k, 0])
        m4 = np.mean((y - y.mean()) ** 4)
        se = math.sqrt((m4 - y.var() ** 2) / y.size)
        assert abs(alm_statistic(c, np.zeros((1, 1)))[0] - y.var()) <= 3 * se

    def test_particle_order_invariance(self, rng):
        X = rng.random((30, 1))
        c = Cloud.from_arrays(X[:5], X[:5, 0], ConstantLeaf(), n_particles=40)
        c.run(X[5:], np.sin(9 * X[5:, 0]))
        Xc = rng.random((20, 1))
        a, l1 = alm_statistic(c, Xc), alc_statistic(c, Xc, Xc)
        c.particles = c.particles[::-1]
        np.testing.assert_allclose(alm_statistic(c, Xc), a, rtol=1e-12)
        np.testing.assert_allclose(alc_statistic(c, Xc, Xc), l1, rtol=1e-12)

    def test_flat_surface(self, rng):
        X = rng.random((200, 1))
        y = rng.normal(size=200)
        c = Cloud.from_arrays(X[:5], y[:5], ConstantLeaf(), n_particles=200, seed=1)
        c.run(X[5:], y[5:])
        v = alm_statistic(c, np.linspace(0.05, 0.95, 10)[:, None])
        v = v[np.isfinite(v)]
        assert v.size >= 7
        assert v.max() / v.min() < 1.5
        assert v.mean() == pytest.approx(y.var(), rel=0.25)


class TestAlc:
    def test_single_reference(self):
        c = stats_cloud([const_stats(5, 0.0, 4.0)])
        assert alc_statistic(c, np.zeros((1, 1)), np.ones((1, 1)))[0] == pytest.approx(0.0666667, abs=1e-7)

    def test_cross_leaf_zero(self, rng):
        X = np.linspace(0, 1, 20)[:, None]
        c = Cloud.from_arrays(X, np.where(X[:, 0] < 0.5, 0.0, 5.0) + 0.1 * rng.normal(size=20), ConstantLeaf(),
                              n_particles=1)
        c.particles = [c.ops.build((0, 0.5, None, None), np.arange(20))]
        v = alc_statistic(c, np.array([[0.1], [0.9]]), np.array([[0.2], [0.3]]))
        assert v[0] > 0 and v[1] == 0.0

    def test_nonnegative(self, rng):
        X = rng.random((60, 2))
        c = Cloud.from_arrays(X[:5], X[:5, 0], ConstantLeaf(2), n_particles=60)
        c.run(X[5:], np.sin(6 * X[5:, 0]) + X[5:, 1])
        Xc = rng.random((40, 2))
        assert np.all(alc_statistic(c, Xc, Xc) >= 0)

    def test_pairwise_oracle(self, rng):
        """Vectorised ALC equals a plain loop over particles and pairs."""
        from dyntree.tree import route
        X = rng.random((50, 1))
        c = Cloud.from_arrays(X[:6], X[:6, 0], ConstantLeaf(), n_particles=30, seed=5)
        c.run(X[6:], np.cos(7 * X[6:, 0]))
        Xc = rng.random((8, 1))
        Xr = rng.random((12, 1))
        want = np.zeros(8)
        for p in c.particles:
            for i, x in enumerate(Xc):
                leaf = route(p, x)
                for xr in Xr:
                    if route(p, xr) is leaf:
                        v = c.model.variance_reduction(leaf.stats, x, xr)
                        want[i] += 0.0 if math.isnan(v) else v
        np.testing.assert_allclose(alc_statistic(c, Xc, Xr), want / c.n, rtol=1e-12)

    def test_rejects_classes(self):
        c = Cloud.from_arrays([[0.0]], [0], MultinomialLeaf(2), n_classes=2, n_particles=2)
        with pytest.raises(TypeError):
            alc_statistic(c, np.zeros((1, 1)), np.zeros((1, 1)))


class TestEntropy:
    def test_uniform_and_bounds(self):
        c = Cloud.from_arrays(np.zeros((3, 1)), [0, 1, 2], MultinomialLeaf(3), n_classes=3, n_particles=4)
        assert entropy_statistic(c, np.zeros((1, 1)))[0] == pytest.approx(math.log(3))
        c.run(np.zeros((30, 1)), [0] * 30)
        e = entropy_statistic(c, np.zeros((1, 1)))[0]
        assert 0 <= e < math.log(3)


def quadratic(x):
    return float((x[0] - 0.3) ** 2)


class TestLoops:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            DesignConfig(M=0)
        with pytest.raises(ValueError):
            DesignConfig(rounds=-1)
        with pytest.raises(ValueError):
            DesignConfig(heuristic="ucb")
        with pytest.raises(ValueError):
            DesignConfig(phi=0)

    def test_zero_rounds(self):
        cfg = DesignConfig(M=10, rounds=0, n_particles=20, seed=1)
        trace, cloud = optimize_loop(quadratic, [(0, 1)], cfg)
        assert len(trace) == 0
        means = cloud.predict_mean(cloud.store.X)
        assert trace.report["best_mean"] == pytest.approx(means.min())
        assert trace.report["n_evaluations"] == 10

    def test_trace_records(self, tmp_path):
        cfg = DesignConfig(M=15, rounds=4, n_particles=30, seed=2)
        trace, cloud = optimize_loop(quadratic, [(0, 1)], cfg)
        assert len(trace) == 4
        keys = {"round", "x_star", "criterion", "y_observed", "y_min_hat", "posterior_mean_at_x_star"}
        for r in trace.rounds:
            assert set(r) == keys
            assert len(r["criterion"]) == 15
        trace.save(tmp_path / "t.json")
        assert json.loads((tmp_path / "t.json").read_text())["report"]["n_evaluations"] == 14

    def test_deterministic(self):
        cfg = DesignConfig(M=15, rounds=4, n_particles=30, seed=2)
        a, _ = optimize_loop(quadratic, [(0, 1)], cfg)
        b, _ = optimize_loop(quadratic, [(0, 1)], cfg)
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
        cfg = DesignConfig(M=15, rounds=4, n_particles=30, seed=2, heuristic="alc", model="linear")
        a, _ = active_learn_loop(quadratic, [(0, 1)], cfg)
        b, _ = active_learn_loop(quadratic, [(0, 1)], cfg)
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())

    def test_objective_failure_keeps_partial_trace(self):
        calls = []

        def f(x):
            calls.append(1)
            if len(calls) > 12:
                raise RuntimeError("simulator crashed")
            return quadratic(x)

        cfg = DesignConfig(M=10, rounds=5, n_particles=20)
        with pytest.raises(DesignAborted, match="simulator crashed") as err:
            optimize_loop(f, [(0, 1)], cfg)
        assert len(err.value.trace) == 2

    def test_nonfinite_objective(self):
        cfg = DesignConfig(M=10, rounds=1, n_particles=20)
        with pytest.raises(DesignAborted):
            optimize_loop(lambda x: float("nan"), [(0, 1)], cfg)

    def test_active_learning_reports_rmse(self):
        grid = np.linspace(0, 1, 50)[:, None]
        cfg = DesignConfig(M=10, rounds=5, n_particles=30, heuristic="alm")
        trace, _ = active_learn_loop(quadratic, [(0, 1)], cfg, truth=(grid, (grid[:, 0] - 0.3) ** 2))
        assert trace.report["rmse"] >= 0
        with pytest.raises(ValueError):
            active_learn_loop(quadratic, [(0, 1)], DesignConfig(heuristic="ei"))

    def test_alc_never_picks_zero_over_positive(self):
        cfg = DesignConfig(M=12, rounds=6, n_particles=30, heuristic="alc", seed=3)
        trace, _ = active_learn_loop(quadratic, [(0, 1)], cfg)
        for r in trace.rounds:
            v = np.array([np.nan if c is None else c for c in r["criterion"]])
            if np.nanmax(v) > 0:
                chosen = v[np.argmax(np.nan_to_num(v, nan=-1))]
                assert chosen > 0
