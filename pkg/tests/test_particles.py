import json
import math

import numpy as np
import pytest

from dyntree import (
    Cloud,
    ConstantLeaf,
    DataStore,
    FilterFailure,
    LinearLeaf,
    MultinomialLeaf,
    bayes_factor,
    posterior_probability,
)
from dyntree import kernels
from dyntree.kernels import LEAF, route_path
from dyntree.particles import mixture_cdf, mixture_quantile, residual_resample
from dyntree.tree import SplitRule, draw_split, dumps, grow_interval, leaves, log_prior, make_leaf


def constant_cloud(y, n_particles=50, seed=0, **kw):
    y = np.asarray(y, dtype=float)
    return Cloud.from_arrays(np.arange(len(y), dtype=float)[:, None], y, ConstantLeaf(), n_particles=n_particles,
                             seed=seed, **kw)


def full_score(tree, model, prior):
    return log_prior(tree, prior) + sum(model.log_marginal(l.stats) for l in leaves(tree))


def checkpoint(cloud):
    return json.dumps(cloud.to_dict(), sort_keys=True)


class TestInit:
    def test_root_particles(self):
        c = constant_cloud([0.0, 1.0, 2.0], n_particles=7)
        assert len(c.particles) == 7
        assert all(p.dim == LEAF and p.stats[0] == 3 for p in c.particles)

    def test_prefix_too_small(self):
        with pytest.raises(ValueError, match="at least 3"):
            constant_cloud([0.0, 1.0])
        with pytest.raises(ValueError, match="at least 4"):
            Cloud.from_arrays(np.zeros((3, 2)), np.zeros(3), LinearLeaf(2))

    def test_kind_mismatch(self):
        with pytest.raises(ValueError, match="response kind"):
            Cloud.from_arrays(np.zeros((3, 1)), [0, 1, 0], ConstantLeaf(), n_classes=2)

    def test_default_t0(self):
        assert constant_cloud([0.0, 1.0, 2.0]).t0 == 5
        c = Cloud.from_arrays(np.random.default_rng(0).random((4, 2)), np.arange(4.0), LinearLeaf(2))
        assert c.t0 == 5

    def test_linear_moves_start_at_twice_min_leaf(self):
        rng = np.random.default_rng(3)
        X = rng.random((12, 2))
        y = np.where(X[:, 0] < 0.5, 0.0, 50.0) + X @ [1.0, -1.0] + 0.01 * rng.normal(size=12)
        c = Cloud.from_arrays(X[:4], y[:4], LinearLeaf(2), n_particles=200, seed=1)
        for t in range(4, 7):
            c.step(X[t], y[t])
            assert all(p.dim == LEAF for p in c.particles)
        grown = False
        for t in range(7, 12):
            c.step(X[t], y[t])
            grown = grown or any(p.dim != LEAF for p in c.particles)
        assert grown


class TestWeights:
    def test_identical_particles_uniform(self, rng):
        c = constant_cloud(rng.normal(size=6))
        w = c.weights([2.5], 0.3)
        assert np.all(w == w[0])

    def test_multinomial_value(self):
        c = Cloud.from_arrays([[0.0]], [0], MultinomialLeaf(2), n_classes=2, n_particles=3)
        np.testing.assert_allclose(c.weights([0.0], 0), math.log(0.75))

    def test_constant_value(self):
        c = constant_cloud([0.0, 1.0, 2.0], n_particles=2)
        # St(1; 1, 4/3, 2) at its mode
        want = math.lgamma(1.5) - math.lgamma(1.0) - 0.5 * math.log(2 * math.pi * 4 / 3)
        np.testing.assert_allclose(c.weights([5.0], 1.0), want, rtol=1e-12)

    def test_single_particle_increment(self, rng):
        y = rng.normal(size=8)
        c = constant_cloud(y[:5], n_particles=1)
        lw = c.weights([5.0], y[5])[0]
        assert c.step([5.0], y[5]) == pytest.approx(lw, abs=1e-14)
        assert c.log_ml == pytest.approx(lw, abs=1e-14)


class TestResample:
    def test_example_deterministic_part(self):
        w = np.array([0.5, 0.25, 0.125, 0.125])
        counts = np.zeros(4)
        for u in np.linspace(0, 1, 101)[:-1]:
            idx = residual_resample(np.log(w), [u])
            c = np.bincount(idx, minlength=4)
            assert c[0] >= 2 and c[1] >= 1 and c.sum() == 4
            assert c[0] == 2 and c[1] == 1
            counts += c
        np.testing.assert_allclose(counts[2:] / 100, [0.5, 0.5])

    def test_uniform_identity(self):
        idx = residual_resample(np.zeros(5), np.random.default_rng(0).random(5))
        assert sorted(idx.tolist()) == list(range(5))

    def test_one_winner(self):
        lw = np.full(6, -np.inf)
        lw[3] = 0.0
        assert residual_resample(lw, np.random.default_rng(0).random(6)).tolist() == [3] * 6

    def test_all_dead(self):
        with pytest.raises(FilterFailure):
            residual_resample(np.full(3, -np.inf), [0.1, 0.2, 0.3])

    def test_unbiased(self):
        rng = np.random.default_rng(11)
        N = 10
        w = rng.dirichlet(np.ones(N) * 0.7)
        T = 100_000
        counts = np.empty((T, N))
        for t in range(T):
            counts[t] = np.bincount(kernels.residual_resample(w, rng.random(N)), minlength=N)
        mean = counts.mean(axis=0)
        se = counts.std(axis=0, ddof=1) / math.sqrt(T)
        assert np.all(np.abs(mean - N * w) <= 3 * se + 1e-12)
        assert np.all(counts.sum(axis=1) == N)


class TestPropagate:
    def _setup(self, rng, n=30):
        X = rng.random((n + 1, 2))
        y = np.where(X[:, 0] < 0.5, 0.0, 3.0) + rng.normal(size=n + 1)
        store = DataStore.from_arrays(X[:n], y[:n])
        cloud = Cloud(store, ConstantLeaf(), n_particles=1, seed=0)
        model, prior, ops = cloud.model, cloud.prior, cloud.ops
        root = ops.build((0, 0.5, (1, 0.5, None, None), None), np.arange(n))
        row = store.append(X[n], y[n])
        return cloud, model, prior, ops, root, row

    def test_only_stay_below_twice_min_leaf(self):
        c = constant_cloud([0.0, 1.0, 2.0, 3.0], n_particles=20)
        c.step([5.0], 10.0)
        assert all(p.dim == LEAF and p.rows.shape[0] == 5 for p in c.particles)

    def test_moves_match_full_tree_posterior(self, rng):
        checked = 0
        for trial in range(60):
            cloud, model, prior, ops, root, row = self._setup(rng)
            x = cloud.store.X[row]
            path = route_path(root, x)
            leaf = path[-1]
            if leaf.rows.shape[0] < 3:
                continue
            cands = {"stay": ops.stay(root, path, row)}
            if len(path) > 1:
                cands["prune"] = ops.prune(root, path, pending=row)
            vals = cloud.store.X[np.append(leaf.rows, row)]
            elig = [j for j in range(2) if grow_interval(vals[:, j], model.min_leaf) is not None]
            u1, u2 = rng.random(2)
            if elig:
                j = elig[min(int(u1 * len(elig)), len(elig) - 1)]
                lo, hi = grow_interval(vals[:, j], model.min_leaf)
                cands["grow"] = ops.grow(root, path, SplitRule(j, draw_split(lo, hi, u2)), pending=row)
            names = list(cands)
            scores = np.array([full_score(cands[k], model, prior) for k in names])
            p = np.exp(scores - scores.max())
            cum = np.cumsum(p) / p.sum()
            for k, name in enumerate(names):
                lo_u = 0.0 if k == 0 else cum[k - 1]
                if cum[k] - lo_u < 1e-6:
                    continue
                for u3 in (lo_u + 1e-9, cum[k] - 1e-9):
                    got = cloud.propagate(root, row, [u1, u2, u3])
                    assert dumps(got) == dumps(cands[name]), (trial, name, u3)
                    checked += 1
        assert checked > 100

    def test_step_function_prefers_grow(self):
        fractions = []
        for h in (0.0, 2.0, 50.0):
            y = [0.0, 0.01, -0.01, h, h + 0.01]
            c = constant_cloud(y, n_particles=400, seed=4)
            c.step([5.0], h - 0.01)
            fractions.append(np.mean([p.dim != LEAF for p in c.particles]))
        assert 0.3 < fractions[0] < 0.7
        assert fractions[0] < fractions[1] <= fractions[2]
        assert fractions[2] > 0.99

    def test_stats_match_batch_after_every_step(self, rng):
        X = rng.random((100, 2))
        y = np.sin(6 * X[:, 0]) + X[:, 1] + 0.1 * rng.normal(size=100)
        for model in (ConstantLeaf(2), LinearLeaf(2)):
            c = Cloud.from_arrays(X[:5], y[:5], model, n_particles=40, seed=2)
            for t in range(5, 100):
                c.step(X[t], y[t])
                roots, _ = c.unique()
                for r in roots[:5]:
                    for l in leaves(r):
                        want = model.batch(c.store.X[l.rows], c.store.yf[l.rows])
                        np.testing.assert_allclose(l.stats, want, rtol=1e-8, atol=1e-8 * max(1, np.abs(want).max()))
                        assert l.lml == pytest.approx(model.log_marginal(want), rel=1e-8, abs=1e-8)


class TestMarginal:
    def test_root_locked_equals_closed_form(self, rng):
        y = rng.normal(size=40) * 2 + 1
        c = constant_cloud(y[:5], n_particles=10, moves=False)
        c.run(np.arange(5, 40.0)[:, None], y[5:])
        m = ConstantLeaf()
        want = m.log_marginal(m.batch(None, y)) - m.log_marginal(m.batch(None, y[:5]))
        assert c.log_ml == pytest.approx(want, rel=1e-10)

    def test_increments_sum(self, rng):
        y = rng.normal(size=30)
        c = constant_cloud(y[:3], n_particles=30)
        c.run(np.arange(3, 30.0)[:, None], y[3:])
        assert len(c.increments) == 30 - 5
        assert c.log_marginal_estimate() == pytest.approx(sum(c.increments), abs=1e-12)

    def test_bayes_factor(self, rng):
        y = rng.normal(size=20)
        a = constant_cloud(y[:5], seed=1)
        b = constant_cloud(y[:5], seed=1)
        for cl in (a, b):
            cl.run(np.arange(5, 20.0)[:, None], y[5:])
        assert bayes_factor(a, b) == 0.0
        assert posterior_probability(2.3) == pytest.approx(0.909, abs=5e-4)
        c = constant_cloud(y[:5], seed=1, t0=6)
        c.run(np.arange(5, 20.0)[:, None], y[5:])
        with pytest.raises(ValueError, match="prefix"):
            bayes_factor(a, c)
        d = constant_cloud(y[:5], seed=1)
        d.run(np.arange(5, 20.0)[:, None], y[5:][::-1])
        with pytest.raises(ValueError, match="order"):
            bayes_factor(a, d)

    def test_filter_failure(self):
        c = constant_cloud([3.0, 3.0, 3.0], n_particles=5)
        with pytest.raises(FilterFailure, match="observation 4"):
            c.step([3.0], 3.0)


class TestPredict:
    def _two_leaf_cloud(self, means):
        c = constant_cloud([0.0, 1.0, 2.0, 3.0, 4.0], n_particles=len(means))
        v = math.sqrt(1 / 6) * np.arange(-2, 3.0)  # predictive variance 1 with n = 5
        roots = []
        for m in means:
            s = ConstantLeaf().batch(None, v + m)
            roots.append(make_leaf(0, np.arange(5), s, ConstantLeaf().log_marginal(s), c.prior))
        c.particles = roots
        return c

    def test_mixture_moments(self):
        p = self._two_leaf_cloud([0.0, 2.0]).predict(np.zeros((1, 1)))
        assert p.mean[0] == pytest.approx(1.0)
        assert p.var[0] == pytest.approx(2.0)

    def test_single_component_interval(self):
        c = self._two_leaf_cloud([0.7])
        p = c.predict(np.zeros((1, 1)))
        t = c.model.predictive(c.particles[0].stats)
        lo, hi = p.interval(0.9)
        assert lo[0] == pytest.approx(float(t.ppf(0.05)), abs=1e-10)
        assert hi[0] == pytest.approx(float(t.ppf(0.95)), abs=1e-10)

    def test_undefined_variance(self):
        c = constant_cloud([0.0, 1.0, 2.0], n_particles=3)
        p = c.predict(np.zeros((2, 1)))
        assert np.all(np.isnan(p.var))  # c = 2
        assert np.all(np.isfinite(p.quantiles[0.05]))

    def test_class_tie_lowest_index(self):
        c = Cloud.from_arrays([[0.0]], [0], MultinomialLeaf(3), n_classes=3, n_particles=2)
        m = c.model
        a, b = np.array([1.0, 1, 0, 0]), np.array([1.0, 0, 1, 0])
        c.particles = [make_leaf(0, np.arange(1), a, m.log_marginal(a), c.prior),
                       make_leaf(0, np.arange(1), b, m.log_marginal(b), c.prior)]
        p = c.predict(np.zeros((1, 1)))
        np.testing.assert_allclose(p.probs[0], [5 / 12, 5 / 12, 1 / 6])
        assert p.cls[0] == 0
        assert p.entropy[0] == pytest.approx(-(2 * 5 / 12 * math.log(5 / 12) + 1 / 6 * math.log(1 / 6)))

    def test_quantiles_invert_cdf(self, rng):
        for _ in range(20):
            k = int(rng.integers(1, 6))
            A = rng.normal(size=(k, 4)) * 3
            B = rng.uniform(0.01, 4, (k, 4))
            C = rng.uniform(1.2, 30, (k, 4))
            w = rng.dirichlet(np.ones(k))
            prev = None
            for p in (0.01, 0.05, 0.5, 0.95, 0.99):
                q = mixture_quantile(p, A, B, C, w)
                assert np.max(np.abs(mixture_cdf(q, A, B, C, w) - p)) <= 1e-9
                if prev is not None:
                    assert np.all(q > prev)
                prev = q

    def test_consistency_normal_data(self):
        rng = np.random.default_rng(8)
        y = 5 + rng.normal(size=500)
        X = rng.random((500, 1))
        c = Cloud.from_arrays(X[:5], y[:5], ConstantLeaf(), n_particles=300, seed=3)
        c.run(X[5:], y[5:])
        p = c.predict(np.array([[0.25], [0.75]]))
        assert np.all(np.abs(p.mean - 5) <= 3 / math.sqrt(500) * 2)
        assert np.all(np.abs(p.var - 1) <= 3 * math.sqrt(2 / 500) * 2)

    def test_fit_predict_finite_on_training_inputs(self, rng):
        X = rng.random((60, 2))
        y = X[:, 0] ** 2 + 0.1 * rng.normal(size=60)
        c = Cloud.from_arrays(X[:6], y[:6], LinearLeaf(2), n_particles=100, seed=0)
        c.run(X[6:], y[6:])
        p = c.predict(X)
        assert np.all(np.isfinite(p.mean))


class TestDeterminism:
    def _run(self, seed, X, y, stop=None):
        c = Cloud.from_arrays(X[:5], y[:5], ConstantLeaf(2), n_particles=100, seed=seed)
        c.run(X[5:stop], y[5:stop])
        return c

    def test_identical_runs(self, rng):
        X = rng.random((80, 2))
        y = np.sin(5 * X[:, 0]) + 0.1 * rng.normal(size=80)
        a, b = self._run(7, X, y), self._run(7, X, y)
        assert checkpoint(a) == checkpoint(b)
        np.testing.assert_array_equal(a.predict(X).mean, b.predict(X).mean)
        assert checkpoint(self._run(8, X, y)) != checkpoint(a)

    def test_checkpoint_resume(self, rng, tmp_path):
        X = rng.random((80, 2))
        y = np.sin(5 * X[:, 0]) + 0.1 * rng.normal(size=80)
        full = self._run(3, X, y)
        half = self._run(3, X, y, stop=40)
        half.save(tmp_path / "c.json")
        resumed = Cloud.load(tmp_path / "c.json")
        resumed.run(X[40:], y[40:])
        assert checkpoint(resumed) == checkpoint(full)
        assert resumed.log_ml == full.log_ml

    def test_checkpoint_sharing_preserved(self, rng, tmp_path):
        X = rng.random((40, 1))
        c = Cloud.from_arrays(X[:5], X[:5, 0], ConstantLeaf(), n_particles=50, seed=1)
        c.run(X[5:], X[5:, 0])
        r = Cloud.from_dict(json.loads(json.dumps(c.to_dict())))
        assert len(r.unique()[0]) == len(c.unique()[0])

    def test_bad_checkpoint(self):
        with pytest.raises(ValueError):
            Cloud.from_dict({"format": "other"})
