"""Desk-scale experiments on the synthetic test functions.

Each function runs a complete seeded experiment and returns plain Python
data (lists and dicts) ready for CSV or JSON output.  Repetitions draw
their randomness from named substreams of a single seed, so any one
repetition can be rerun on its own.
"""

from __future__ import annotations

import numpy as np

from . import testfuncs
from .design import DesignConfig, active_learn_loop, optimize_loop, substream
from .leaves import make_model
from .particles import Cloud
from .tree import TreePrior


def derived_seed(seed: int, *key: int) -> int:
    """A 32-bit seed for repetition ``key`` under the master ``seed``."""
    return int(np.random.SeedSequence([int(seed), *map(int, key)]).generate_state(1)[0])


def _cloud(X, y, kind, t0, n_particles, seed, prior=None, min_leaf=None, n_classes=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    model = make_model(kind, X.shape[1], n_classes, min_leaf)
    return Cloud.from_arrays(X[:t0], y[:t0], model, n_classes=n_classes, n_particles=n_particles,
                             prior=prior or TreePrior(), seed=seed, t0=t0)


def filter_pair(X, y, leaf_a: str, leaf_b: str, t0: int, n_particles: int, seed: int, prior=None):
    """Run two leaf models over the same data order; returns both clouds and the log BF trace."""
    ca = _cloud(X, y, leaf_a, t0, n_particles, seed, prior)
    cb = _cloud(X, y, leaf_b, t0, n_particles, seed, prior)
    trace = []
    for x, v in zip(X[t0:], y[t0:]):
        ca.step(x, v)
        cb.step(x, v)
        trace.append(ca.log_ml - cb.log_ml)
    return ca, cb, trace


def bayes_factor_experiment(X, y, reps: int = 30, leaf_a: str = "linear", leaf_b: str = "constant",
                            t0: int = 5, n_particles: int = 1000, seed: int = 0, grid=None, truth=None):
    """Filtered log Bayes factors over random reorderings of one data set.

    Both models see the same permutation and hence the same first ``t0``
    rows.  When ``grid`` and ``truth`` are given, the posterior-mean RMSE
    of each model is recorded as well.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    out = []
    for r in range(reps):
        perm = substream(seed, "order", r).permutation(X.shape[0])
        ca, cb, trace = filter_pair(X[perm], y[perm], leaf_a, leaf_b, t0, n_particles, derived_seed(seed, r))
        row = {"rep": r, "log_bf": trace[-1] if trace else 0.0, "trace": trace}
        if grid is not None:
            row["rmse_a"] = testfuncs.rmse(ca.predict_mean(grid), truth)
            row["rmse_b"] = testfuncs.rmse(cb.predict_mean(grid), truth)
            row["height_a"] = ca.average_height()
            row["height_b"] = cb.average_height()
        out.append(row)
    return out


def parabola(reps: int = 30, n: int = 100, n_particles: int = 1000, seed: int = 0, t0: int = 5, grid_size: int = 200):
    """Linear against constant leaves on the parabola data."""
    f = testfuncs.get("parabola")
    rng = substream(seed, "data")
    X = f.uniform(n, rng)
    y = f.sample(X, substream(seed, "noise"))
    grid = np.linspace(*f.bounds[0], grid_size)[:, None]
    return bayes_factor_experiment(X, y, reps, "linear", "constant", t0, n_particles, seed, grid, f(grid))


def friedman(reps: int = 20, n_train: int = 200, n_test: int = 1000, n_particles: int = 1000, seed: int = 0,
             leaves=("linear", "constant"), min_leaf=None):
    """Out-of-sample RMSE on fresh Friedman training and test sets per repetition."""
    f = testfuncs.get("friedman")
    out = []
    for r in range(reps):
        X = f.uniform(n_train, substream(seed, "data", r))
        y = f.sample(X, substream(seed, "noise", r))
        Xt = f.uniform(n_test, substream(seed, "holdout", r))
        truth = f(Xt)
        row = {"rep": r}
        for kind in leaves:
            model = make_model(kind, f.d, min_leaf=min_leaf)
            t0 = max(model.min_rows, model.default_t0())
            c = _cloud(X, y, kind, t0, n_particles, derived_seed(seed, r), min_leaf=min_leaf)
            c.run(X[t0:], y[t0:])
            row[kind] = testfuncs.rmse(c.predict_mean(Xt), truth)
        out.append(row)
    return out


def sincauchy_active(reps: int = 30, heuristics=("alc", "alm"), n_init: int = 10, rounds: int = 40,
                     candidates: int = 20, n_particles: int = 1000, seed: int = 0, leaf: str = "linear",
                     holdout: int = 200):
    """Active learning on the sin/Cauchy function; RMSE on a holdout grid."""
    f = testfuncs.get("sincauchy")
    grid = np.linspace(*f.bounds[0], holdout)[:, None]
    truth = f(grid)
    out = []
    for r in range(reps):
        row = {"rep": r}
        for h in heuristics:
            cfg = DesignConfig(M=candidates, heuristic=h, rounds=rounds, n_particles=n_particles,
                               seed=derived_seed(seed, r), model=leaf, n_init=n_init)
            noise = substream(seed, "noise", r)
            trace, _ = active_learn_loop(f.objective(noise), f.bounds, cfg, truth=(grid, truth))
            row[h] = trace.report["rmse"]
        out.append(row)
    return out


def exp2d_optimize(reps: int = 50, n_init: int = 10, rounds: int = 10, candidates: int = 200,
                   n_particles: int = 1000, seed: int = 0, leaf: str = "constant", phi: float = 1.0):
    """Minimise the 2-d exponential function by maximising ``G``.

    The solution of a run is the observed input with the smallest
    posterior mean; ``best_mean`` is that posterior mean and ``value`` the
    noiseless objective there.
    """
    f = testfuncs.get("exp2d")
    out = []
    for r in range(reps):
        cfg = DesignConfig(M=candidates, phi=phi, heuristic="ei", rounds=rounds, n_particles=n_particles,
                           seed=derived_seed(seed, r), model=leaf, n_init=n_init)
        trace, _ = optimize_loop(f.objective(substream(seed, "noise", r)), f.bounds, cfg)
        rep = trace.report
        out.append({"rep": r, "best_mean": rep["best_mean"], "value": float(f(np.array(rep["best_x"]))[0]),
                    "x1": rep["best_x"][0], "x2": rep["best_x"][1]})
    return out


# ---------------------------------------------------------------------------
# synthetic classification


def three_class_labels(X) -> np.ndarray:
    """Class 0 left of ``x1 = 0.4``; to the right, class 1 below ``x2 = 0.6`` and class 2 above."""
    X = np.asarray(X, dtype=float)
    return np.where(X[:, 0] < 0.4, 0, np.where(X[:, 1] < 0.6, 1, 2))


def boundary_distance(X) -> np.ndarray:
    """Euclidean distance from each row to the nearest class boundary."""
    X = np.asarray(X, dtype=float)
    d1 = np.abs(X[:, 0] - 0.4)
    dx = np.maximum(0.4 - X[:, 0], 0.0)
    d2 = np.hypot(dx, X[:, 1] - 0.6)
    return np.minimum(d1, d2)


def noisy_labels(X, rng: np.random.Generator, rate: float = 0.05, n_classes: int = 3) -> np.ndarray:
    """True labels with a fraction ``rate`` switched to a different class."""
    c = three_class_labels(X)
    flip = rng.random(c.shape[0]) < rate
    c[flip] = (c[flip] + rng.integers(1, n_classes, flip.sum())) % n_classes
    return c


def classification(n_train: int = 500, n_test: int = 2000, n_particles: int = 1000, seed: int = 0,
                   grid_cells: int = 50, noise: float = 0.05):
    """Multinomial leaves on the three-class problem.

    Returns the held-out error against noisy labels and the clean truth,
    plus the entropy argmax on a ``grid_cells`` square grid and its
    distance to the nearest boundary.
    """
    X = substream(seed, "data").random((n_train, 2))
    y = noisy_labels(X, substream(seed, "noise"), noise)
    Xt = substream(seed, "holdout").random((n_test, 2))
    yt = noisy_labels(Xt, substream(seed, "holdout", 1), noise)
    c = _cloud(X, y, "multinomial", 1, n_particles, derived_seed(seed, 0), n_classes=3)
    c.run(X[1:], y[1:])
    pred = c.predict(Xt)
    h = 1.0 / grid_cells
    g = (np.arange(grid_cells) + 0.5) * h
    G = np.array([(a, b) for a in g for b in g])
    ent = c.predict(G).entropy
    i = int(np.argmax(ent))
    return {
        "error": float(np.mean(pred.cls != yt)),
        "error_clean": float(np.mean(pred.cls != three_class_labels(Xt))),
        "entropy_argmax": G[i].tolist(),
        "entropy_max": float(ent[i]),
        "boundary_distance": float(boundary_distance(G[i:i + 1])[0]),
        "cell": h,
    }


EXPERIMENTS = {
    "parabola": parabola,
    "friedman": friedman,
    "sincauchy": sincauchy_active,
    "exp2d": exp2d_optimize,
    "classification": classification,
}
