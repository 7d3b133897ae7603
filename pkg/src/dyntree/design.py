"""Sequential design with dynamic trees: optimization and active learning.

Every criterion is evaluated conditional on each distinct particle tree and
then averaged over the cloud.  Candidates whose statistic is undefined (too
few leaf points for the needed moments) come back as ``nan`` and are never
selected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import gammaln, stdtr

from .leaves import make_model
from .particles import Cloud
from .tree import TreePrior

# named random substreams derived from one seed
STREAMS = {"data": 1, "lhs": 2, "init": 3, "noise": 4, "order": 5, "holdout": 6}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for the named purpose under ``seed``."""
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, extra)])


def as_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if not np.all(b[:, 0] < b[:, 1]):
        raise ValueError("every bound needs lo < hi")
    return b


def lhs(M: int, bounds, rng: np.random.Generator) -> np.ndarray:
    """Latin hypercube sample of ``M`` points in the box ``bounds``.

    Each dimension's values fall in distinct strata of width
    ``(hi - lo) / M``, jittered uniformly within their stratum.
    """
    if M < 1:
        raise ValueError("need at least one point")
    b = as_bounds(bounds)
    d = b.shape[0]
    strata = np.column_stack([rng.permutation(M) for _ in range(d)])
    u = (strata + rng.random((M, d))) / M
    return b[:, 0] + u * (b[:, 1] - b[:, 0])


# ---------------------------------------------------------------------------
# criteria


def _t_pdf(c, z):
    return np.exp(gammaln(0.5 * (c + 1.0)) - gammaln(0.5 * c) - 0.5 * np.log(c * math.pi)
                  - 0.5 * (c + 1.0) * np.log1p(z * z / c))


def ei_student(a, b, c, y_min):
    """Expected improvement ``E[max(y_min - Y, 0)]`` for ``Y ~ St(a, b, c)``.

    Vectorised; ``nan`` where ``c <= 1`` (no finite mean).
    """
    a, b, c = (np.asarray(v, dtype=float) for v in (a, b, c))
    with np.errstate(divide="ignore", invalid="ignore"):
        sb = np.sqrt(b)
        gap = y_min - a
        z = gap / sb
        out = gap * stdtr(c, z) + sb / (c - 1.0) * (c + z * z) * _t_pdf(c, z)
    out = np.where(c > 1.0, np.maximum(out, 0.0), np.nan)
    return out if out.ndim else float(out)


def _weights(w, ok, partial: bool):
    """Particle weights per input; with ``partial`` only defined particles count."""
    if not partial:
        return np.broadcast_to(w[:, None], ok.shape)
    W = w[:, None] * ok
    tot = W.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(tot > 0, W / tot, np.nan)


def _average(vals, w, partial: bool):
    ok = np.isfinite(vals)
    W = _weights(w, ok, partial)
    return np.sum(W * np.where(ok | ~partial, vals, 0.0), axis=0)


def _mixture_var(A, V, w, partial: bool = False):
    ok = np.isfinite(V) & np.isfinite(A)
    W = _weights(w, ok, partial)
    A0 = np.where(ok | ~partial, A, 0.0)
    V0 = np.where(ok | ~partial, V, 0.0)
    mean = np.sum(W * A0, axis=0)
    var = np.sum(W * (V0 + A0 * A0), axis=0) - mean * mean
    return np.maximum(var, 0.0)


def _t_var(B, C):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(C > 2.0, B * C / (C - 2.0), np.nan)


def expected_improvement(cloud: Cloud, X, y_min: float, partial: bool = False) -> np.ndarray:
    """Particle-averaged expected improvement of the mean function.

    A particle whose mean posterior has ``c <= 1`` at an input makes that
    input ``nan``, unless ``partial`` is set, in which case the average runs
    over the particles where the statistic is defined.
    """
    A, B, C, w = cloud.components(X, noise=False)
    return _average(ei_student(A, B, C, y_min), w, partial)


def mean_sd(cloud: Cloud, X, partial: bool = False) -> np.ndarray:
    """Posterior standard deviation of the mean function over the cloud."""
    A, B, C, w = cloud.components(X, noise=False)
    return np.sqrt(_mixture_var(A, _t_var(B, C), w, partial))


def y_min_hat(cloud: Cloud, reference) -> float:
    """Smallest posterior mean over the reference inputs."""
    R = np.atleast_2d(np.asarray(reference, dtype=float))
    if R.shape[0] == 0:
        raise ValueError("reference set is empty")
    return float(np.min(cloud.predict_mean(R)))


def g_statistic(cloud: Cloud, X, phi: float, y_min: float, partial: bool = False) -> np.ndarray:
    """``E[I(x)] + sd(yhat(x)) / phi`` at the rows of ``X``.

    Undefined (``nan``) where any particle has ``c <= 2``; see
    :func:`expected_improvement` for ``partial``.
    """
    if not phi > 0:
        raise ValueError("phi must be positive")
    A, B, C, w = cloud.components(X, noise=False)
    ei = _average(ei_student(A, B, C, y_min), w, partial)
    sd = np.sqrt(_mixture_var(A, _t_var(B, C), w, partial))
    return ei + sd / phi


def alm_statistic(cloud: Cloud, X, partial: bool = False) -> np.ndarray:
    """Mixture predictive variance at the rows of ``X``."""
    A, B, C, w = cloud.components(X, noise=True)
    return _mixture_var(A, _t_var(B, C), w, partial)


def alc_statistic(cloud: Cloud, X, reference, chunk: int = 2_000_000) -> np.ndarray:
    """Expected reduction in predictive variance summed over ``reference``.

    For each particle only reference points sharing the candidate's leaf
    contribute; undefined leaf terms count as zero.  The result is the
    particle average.
    """
    if not cloud.model.real:
        raise TypeError("ALC needs a real-response model")
    Xc = np.atleast_2d(np.asarray(X, dtype=float))
    Xr = np.atleast_2d(np.asarray(reference, dtype=float))
    mc, mr = Xc.shape[0], Xr.shape[0]
    if mr == 0:
        raise ValueError("reference set is empty")
    w, S, leaf, col, pair = cloud._leaf_pairs(np.vstack([Xc, Xr]))
    L = leaf[pair]
    Lc, Lr = L[:, :mc], L[:, mc:]
    keys, inv = np.unique(Lc * mc + np.arange(mc), return_inverse=True)
    inv = inv.reshape(Lc.shape)
    V = cloud.model.variance_reduction_rows(S[keys // mc], Xc[keys % mc], Xr)
    V = np.nan_to_num(V, nan=0.0)
    out = np.zeros(mc)
    step = max(1, chunk // max(1, mc * mr))
    for lo in range(0, L.shape[0], step):
        sl = slice(lo, lo + step)
        same = Lr[sl, None, :] == Lc[sl, :, None]
        out += w[sl] @ (V[inv[sl]] * same).sum(axis=2)
    return out


def entropy_statistic(cloud: Cloud, X) -> np.ndarray:
    """Entropy of the posterior mean class probabilities."""
    return cloud.predict(X).entropy


# ---------------------------------------------------------------------------
# loops


HEURISTICS = ("ei", "alm", "alc", "entropy")


@dataclass
class DesignConfig:
    """Settings shared by the optimization and active learning loops.

    ``heuristic`` is ``"ei"`` (the ``G`` statistic) for optimization and
    one of ``"alm"``, ``"alc"`` or ``"entropy"`` for active learning.
    """

    M: int = 100
    phi: float = 1.0
    heuristic: str = "ei"
    rounds: int = 10
    n_particles: int = 1000
    seed: int = 0
    model: str = "constant"
    n_init: int = 10
    alpha: float = 0.95
    beta: float = 2.0
    min_leaf: int | None = None

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if not self.phi > 0:
            raise ValueError("phi must be positive")
        if self.heuristic not in HEURISTICS:
            raise ValueError(f"heuristic must be one of {HEURISTICS}")


@dataclass
class DesignTrace:
    """Per-round records of a design loop plus its final report."""

    rounds: list = field(default_factory=list)
    report: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rounds)

    def to_dict(self) -> dict:
        return {"rounds": self.rounds, "report": self.report}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


class DesignAborted(RuntimeError):
    """The objective failed; ``trace`` holds the rounds completed so far."""

    def __init__(self, message: str, trace: DesignTrace):
        super().__init__(message)
        self.trace = trace


def _evaluate(f, x, trace):
    try:
        y = f(x)
    except Exception as exc:  # noqa: BLE001 - report any objective failure
        raise DesignAborted(f"objective failed at x={np.asarray(x).tolist()}: {exc}", trace) from exc
    if isinstance(y, (int, np.integer)):
        return int(y)
    y = float(y)
    if not math.isfinite(y):
        raise DesignAborted(f"objective returned {y} at x={np.asarray(x).tolist()}", trace)
    return y


def start_cloud(f: Callable, bounds, config: DesignConfig, trace: DesignTrace, n_classes=None) -> Cloud:
    """Evaluate an initial LHS design and filter it into a new cloud.

    The first ``default_t0`` points (at most ``n_init``) seed the root; the
    rest are absorbed one at a time.
    """
    b = as_bounds(bounds)
    X0 = lhs(config.n_init, b, substream(config.seed, "init"))
    y0 = [_evaluate(f, x, trace) for x in X0]
    model = make_model(config.model, b.shape[0], n_classes, config.min_leaf)
    k = min(config.n_init, max(model.min_rows, model.default_t0()))
    if k < model.min_rows:
        raise ValueError(f"initial design of {config.n_init} is below the model minimum {model.min_rows}")
    cloud = Cloud.from_arrays(
        X0[:k], y0[:k], model, n_classes=n_classes, n_particles=config.n_particles,
        prior=TreePrior(config.alpha, config.beta), seed=config.seed,
    )
    cloud.run(X0[k:], y0[k:])
    return cloud


def _first_defined(*stats):
    """The first statistic in the list defined for at least one candidate."""
    for f in stats:
        v = f()
        if not np.all(np.isnan(v)):
            return v
    return v


def _pick(values) -> int:
    """Index of the largest defined value, ties to the lowest index.

    The loops fall back to weaker statistics before an all-undefined
    vector reaches this point; then the first candidate is taken.
    """
    v = np.asarray(values, dtype=float)
    if np.all(np.isnan(v)):
        return 0
    return int(np.nanargmax(v))


def optimize_loop(objective: Callable, bounds, config: DesignConfig, cloud: Cloud | None = None) -> tuple[DesignTrace, Cloud]:
    """Minimise a noisy black-box function by maximising ``G`` over LHS candidates.

    Returns the trace and the final cloud.  The report holds the smallest
    posterior mean over observed inputs and where it occurs.
    """
    b = as_bounds(bounds)
    trace = DesignTrace()
    if cloud is None:
        cloud = start_cloud(objective, b, config, trace)
    rng = substream(config.seed, "lhs")
    for r in range(config.rounds):
        Xc = lhs(config.M, b, rng)
        y_min = y_min_hat(cloud, np.vstack([Xc, cloud.store.X]))
        crit = _first_defined(
            lambda: g_statistic(cloud, Xc, config.phi, y_min),
            lambda: g_statistic(cloud, Xc, config.phi, y_min, partial=True),
            lambda: expected_improvement(cloud, Xc, y_min, partial=True),
        )
        i = _pick(crit)
        x = Xc[i]
        mean_x = float(cloud.predict_mean(x[None, :])[0])
        y = _evaluate(objective, x, trace)
        cloud.step(x, y)
        trace.rounds.append({
            "round": r,
            "x_star": x.tolist(),
            "criterion": _jsonable(crit),
            "y_observed": y,
            "y_min_hat": y_min,
            "posterior_mean_at_x_star": mean_x,
        })
    means = cloud.predict_mean(cloud.store.X)
    j = int(np.argmin(means))
    trace.report = {"best_mean": float(means[j]), "best_x": cloud.store.X[j].tolist(), "n_evaluations": cloud.t}
    return trace, cloud


def active_learn_loop(oracle: Callable, bounds, config: DesignConfig, truth=None, cloud: Cloud | None = None,
                      n_classes: int | None = None) -> tuple[DesignTrace, Cloud]:
    """Learn a response surface by sampling where the heuristic is largest.

    ``truth`` is an optional ``(X, mean)`` pair; when given, the report
    holds the RMSE of the final posterior mean against it (or the
    misclassification rate for class responses).
    """
    if config.heuristic == "ei":
        raise ValueError("active learning uses alm, alc or entropy")
    b = as_bounds(bounds)
    trace = DesignTrace()
    if cloud is None:
        cloud = start_cloud(oracle, b, config, trace, n_classes=n_classes)
    rng = substream(config.seed, "lhs")
    for r in range(config.rounds):
        Xc = lhs(config.M, b, rng)
        if config.heuristic == "alm":
            crit = _first_defined(lambda: alm_statistic(cloud, Xc), lambda: alm_statistic(cloud, Xc, partial=True))
        elif config.heuristic == "alc":
            crit = alc_statistic(cloud, Xc, Xc)
        else:
            crit = entropy_statistic(cloud, Xc)
        i = _pick(crit)
        x = Xc[i]
        if cloud.model.real:
            mean_x = float(cloud.predict_mean(x[None, :])[0])
        else:
            mean_x = cloud.predict(x[None, :]).probs[0].tolist()
        y = _evaluate(oracle, x, trace)
        cloud.step(x, y)
        trace.rounds.append({
            "round": r,
            "x_star": x.tolist(),
            "criterion": _jsonable(crit),
            "y_observed": y,
            "y_min_hat": None,
            "posterior_mean_at_x_star": mean_x,
        })
    report = {"n_evaluations": cloud.t}
    if truth is not None:
        Xt, yt = truth
        Xt = np.atleast_2d(np.asarray(Xt, dtype=float))
        if cloud.model.real:
            err = cloud.predict_mean(Xt) - np.asarray(yt, dtype=float)
            report["rmse"] = float(np.sqrt(np.mean(err**2)))
        else:
            report["error_rate"] = float(np.mean(cloud.predict(Xt).cls != np.asarray(yt)))
    trace.report = report
    return trace, cloud


def _jsonable(v) -> list:
    return [None if not np.isfinite(x) else float(x) for x in np.asarray(v, dtype=float)]


__all__ = [
    "DesignAborted",
    "DesignConfig",
    "DesignTrace",
    "active_learn_loop",
    "alc_statistic",
    "alm_statistic",
    "ei_student",
    "entropy_statistic",
    "expected_improvement",
    "g_statistic",
    "lhs",
    "mean_sd",
    "optimize_loop",
    "substream",
    "y_min_hat",
]
