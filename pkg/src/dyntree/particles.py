"""Particle learning for dynamic trees.

A :class:`Cloud` holds ``N`` equally weighted particles, each a tree whose
leaves carry sufficient statistics.  Every new observation is absorbed in
two moves: particles are resampled in proportion to their one-step
predictive probability of the observation, and each resampled particle is
then propagated by a local stay / prune / grow change around the leaf that
contains the new input.

Particles that are copies of one another share a root object.  They are
propagated together: the candidate trees and their scores are computed
once per distinct tree and each copy only draws its own grow location and
move.  All random numbers for step ``t`` come from a generator seeded by
``(seed, t)`` and particle ``i`` always consumes slot ``i`` of each draw, so
a run is reproducible regardless of how particles are grouped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, gammaln, stdtr, stdtrit

from . import kernels
from .data import DataStore
from .leaves import make_model, model_from_dict, model_to_dict
from .tree import TreeOps, TreePrior, from_table, height, route_many, route_path, to_table

CHECKPOINT_FORMAT = "dyntree-cloud"
CHECKPOINT_VERSION = 1


class FilterFailure(RuntimeError):
    """No particle can explain an observation."""


def normalize_log_weights(log_w) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    top = log_w.max()
    if not np.isfinite(top):
        raise FilterFailure("every particle gives the observation zero predictive probability")
    w = np.exp(log_w - top)
    return w / w.sum()


def residual_resample(log_w, u) -> np.ndarray:
    """Indices of the resampled particles.

    ``u`` holds at least ``N`` uniforms; only the first ``N - sum floor(N w)``
    are used, for the residual draws.
    """
    return kernels.residual_resample(normalize_log_weights(log_w), np.asarray(u, dtype=float))


@dataclass
class PredictiveSummary:
    """Mixture-over-particles predictive at a set of inputs.

    Real responses fill ``mean``, ``var`` and the ``quantiles`` mapping;
    class responses fill ``probs``, ``cls`` and ``entropy``.
    """

    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    quantiles: dict | None = None
    probs: np.ndarray | None = None
    cls: np.ndarray | None = None
    entropy: np.ndarray | None = None

    def interval(self, level: float = 0.9):
        lo = 0.5 * (1.0 - level)
        return self.quantiles[round(lo, 12)], self.quantiles[round(1.0 - lo, 12)]


class Cloud:
    """A particle approximation to the posterior over trees.

    Parameters
    ----------
    store : DataStore
        Observations seen so far; the cloud takes ownership and appends to
        it.  All current rows start in the root of every particle.
    model : leaf model
        ``ConstantLeaf``, ``LinearLeaf`` or ``MultinomialLeaf`` (or a name).
    n_particles : int
    prior : TreePrior
    seed : int
    t0 : int, optional
        Observations up to time ``t0`` are conditioned on and excluded from
        the marginal likelihood estimate.  Defaults to the larger of the
        model default and the prefix size.
    moves : bool
        ``False`` disables grow and prune, locking every particle to the
        root.
    """

    def __init__(self, store: DataStore, model, n_particles: int = 1000, prior: TreePrior | None = None,
                 seed: int = 0, t0: int | None = None, moves: bool = True):
        if isinstance(model, str):
            model = make_model(model, store.d, store.n_classes)
        if model.real == store.classification:
            raise ValueError(f"{model!r} does not match the store's response kind")
        if store.n < model.min_rows:
            raise ValueError(f"{model!r} needs at least {model.min_rows} initial rows, got {store.n}")
        if n_particles < 1:
            raise ValueError("need at least one particle")
        self.store = store
        self.model = model
        self.prior = prior if prior is not None else TreePrior()
        self.n = int(n_particles)
        self.seed = int(seed)
        self.t_start = store.n
        self.t0 = max(model.default_t0(), store.n) if t0 is None else int(t0)
        if self.t0 < self.t_start:
            raise ValueError("t0 cannot be smaller than the initial prefix")
        self.moves = bool(moves)
        self.ops = TreeOps(store, model, self.prior)
        root = self.ops.root(np.arange(store.n))
        self.particles = [root] * self.n
        self.log_ml = 0.0
        self.increments: list[float] = []

    @classmethod
    def from_arrays(cls, X, y, model, n_classes=None, binary=None, **kw) -> Cloud:
        store = DataStore.from_arrays(X, y, n_classes=n_classes, binary=binary)
        return cls(store, model, **kw)

    @property
    def t(self) -> int:
        """Number of observations absorbed, including the initial prefix."""
        return self.store.n

    def _rng(self, t: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(t,)))

    @property
    def spec(self) -> tuple[int, int, int, int]:
        """Model description handed to the particle core."""
        return (self.model.code, self.store.d, self.model.spec[2], self.model.min_leaf)

    def unique(self):
        """Distinct particle roots and the group label of every particle."""
        return kernels.group_roots(self.particles)

    # ------------------------------------------------------------------
    # filtering

    def weights(self, x, y) -> np.ndarray:
        """Log one-step predictive probability of ``(x, y)`` under each particle."""
        x, y = self.store.check(x, y)
        roots, labels = self.unique()
        _, lw = kernels.weigh(roots, x, float(y), self.spec)
        return lw[labels]

    def step(self, x, y) -> float:
        """Absorb one observation; returns the log mean predictive weight."""
        x, y = self.store.check(x, y)
        roots, labels = self.unique()
        paths, lw_u = kernels.weigh(roots, x, float(y), self.spec)
        lw = lw_u[labels]
        top = lw.max()
        if not np.isfinite(top):
            raise FilterFailure(f"observation {self.store.n + 1}: no particle can explain it")
        w = np.exp(lw - top)
        inc = float(top + math.log(w.mean()))

        row = self.store.append(x, y)
        t = self.store.n
        if t > self.t0:
            self.log_ml += inc
            self.increments.append(inc)
        u = self._rng(t).random((4, self.n))
        idx = kernels.residual_resample(w / w.sum(), u[0])
        self.particles = kernels.propagate(
            paths,
            labels[idx],
            u,
            row,
            self.store.X,
            self.store.yf,
            self.store.binary,
            self.spec,
            self.prior.log_split_table,
            self.prior.log_stop_table,
            self.moves,
        )
        return inc

    def run(self, X, y, callback=None) -> float:
        """Absorb rows in order; returns the final log marginal likelihood estimate."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        for i, (xi, yi) in enumerate(zip(X, y)):
            self.step(xi, yi)
            if callback is not None:
                callback(self, i)
        return self.log_ml

    def propagate(self, root, row: int, u) -> object:
        """Propagate a single particle for stored row ``row`` (not yet in its leaves).

        ``u`` holds the three uniforms for the grow dimension, grow location
        and move choice.
        """
        path = route_path(root, self.store.X[row])
        uu = np.zeros((4, 1))
        uu[1:, 0] = u
        return kernels.propagate(
            [path],
            np.zeros(1, dtype=np.intp),
            uu,
            row,
            self.store.X,
            self.store.yf,
            self.store.binary,
            self.spec,
            self.prior.log_split_table,
            self.prior.log_stop_table,
            self.moves,
        )[0]

    def log_marginal_estimate(self) -> float:
        return self.log_ml

    # ------------------------------------------------------------------
    # prediction

    def _leaf_pairs(self, X):
        """Distinct (leaf, input) pairs over the distinct trees.

        Returns the tree shares ``w``, the leaf list, the stacked leaf
        statistics, the pair leaf and input indices, and the ``(U, M)``
        map from each tree and input to its pair.
        """
        roots, labels = self.unique()
        w = np.bincount(labels, minlength=len(roots)) / self.n
        m = X.shape[0]
        ids: dict[int, int] = {}
        leaves = []
        L = np.empty((len(roots), m), dtype=np.intp)
        for g, r in enumerate(roots):
            idx, nodes = route_many(r, X)
            local = np.full(len(nodes), -1, dtype=np.intp)
            for f in np.unique(idx):
                node = nodes[f]
                k = ids.get(id(node))
                if k is None:
                    k = ids[id(node)] = len(leaves)
                    leaves.append(node)
                local[f] = k
            L[g] = local[idx]
        keys, inverse = np.unique(L * m + np.arange(m), return_inverse=True)
        S = np.array([leaf.stats for leaf in leaves])
        return w, S, keys // m, keys % m, inverse.reshape(L.shape)

    def components(self, X, noise: bool = True):
        """Student-t components ``(a, b, c)`` per distinct tree and input.

        Returns arrays of shape ``(U, M)`` and the particle share ``w`` of
        each distinct tree (shape ``(U,)``).  ``noise=False`` gives the
        posterior of the mean function instead of the predictive.
        """
        if not self.model.real:
            raise TypeError("Student-t components exist only for real responses")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        w, S, leaf, col, pair = self._leaf_pairs(X)
        a = np.empty(leaf.shape[0])
        b = np.empty_like(a)
        c = np.empty_like(a)
        for lo in range(0, leaf.shape[0], self._CHUNK):
            sl = slice(lo, lo + self._CHUNK)
            a[sl], b[sl], c[sl] = self.model.predictive_rows(S[leaf[sl]], X[col[sl]], noise)
        return a[pair], b[pair], c[pair], w

    _CHUNK = 4096

    def class_probs(self, X):
        """Class probabilities per distinct tree ``(U, M, C)`` and tree shares ``w``."""
        if self.model.real:
            raise TypeError("class probabilities need multinomial leaves")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        w, S, leaf, col, pair = self._leaf_pairs(X)
        return self.model.p_hat_rows(S)[leaf][pair], w

    def predict(self, X, quantiles=(0.05, 0.95)) -> PredictiveSummary:
        """Mixture predictive over particles at the rows of ``X``."""
        if not self.model.real:
            P, w = self.class_probs(X)
            pbar = np.einsum("u,umc->mc", w, P)
            return PredictiveSummary(probs=pbar, cls=np.argmax(pbar, axis=1), entropy=entropy(pbar))
        A, B, C, w = self.components(X)
        mean = w @ A
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(C > 2, B * C / (C - 2.0), np.nan)
        var = w @ (v + A * A) - mean * mean
        qs = {round(float(p), 12): mixture_quantile(p, A, B, C, w) for p in (quantiles or ())}
        return PredictiveSummary(mean=mean, var=var, quantiles=qs)

    def predict_mean(self, X) -> np.ndarray:
        A, _, _, w = self.components(X)
        return w @ A

    # ------------------------------------------------------------------
    # diagnostics and persistence

    def average_height(self) -> float:
        return float(np.mean([height(r) for r in self.particles]))

    def average_leaves(self) -> float:
        return float(np.mean([r.n_leaves for r in self.particles]))

    def to_dict(self) -> dict:
        table, ids = to_table(self.particles, self.model)
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "n_particles": self.n,
            "t0": self.t0,
            "t_start": self.t_start,
            "moves": self.moves,
            "prior": {"alpha": self.prior.alpha, "beta": self.prior.beta},
            "model": model_to_dict(self.model),
            "log_ml": self.log_ml,
            "increments": self.increments,
            "store": self.store.to_dict(),
            "nodes": table,
            "particles": ids,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> Cloud:
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a dyntree cloud checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
        store = DataStore.from_dict(payload["store"])
        model = model_from_dict(payload["model"])
        prior = TreePrior(**payload["prior"])
        cloud = cls.__new__(cls)
        cloud.store = store
        cloud.model = model
        cloud.prior = prior
        cloud.n = int(payload["n_particles"])
        cloud.seed = int(payload["seed"])
        cloud.t0 = int(payload["t0"])
        cloud.t_start = int(payload["t_start"])
        cloud.moves = bool(payload["moves"])
        cloud.ops = TreeOps(store, model, prior)
        cloud.particles = from_table(payload["nodes"], payload["particles"], model, prior)
        cloud.log_ml = float(payload["log_ml"])
        cloud.increments = [float(v) for v in payload["increments"]]
        return cloud

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Cloud:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def entropy(p) -> np.ndarray:
    """Natural-log entropy along the last axis, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def mixture_cdf(q, A, B, C, w) -> np.ndarray:
    """CDF of the Student-t mixture at ``q`` (one value per column)."""
    return w @ stdtr(C, (q[None, :] - A) / np.sqrt(B))


def mixture_quantile(p: float, A, B, C, w, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """Quantile ``p`` of each column's mixture.

    Safeguarded Newton iteration on the mixture CDF, bracketed by the
    smallest and largest component quantiles; a step leaving the bracket
    falls back to bisection.
    """
    A = np.asarray(A, dtype=float)
    S = np.sqrt(np.asarray(B, dtype=float))
    C = np.asarray(C, dtype=float)
    w = np.asarray(w, dtype=float)
    comp = A + S * stdtrit(C, p)
    lo = comp.min(axis=0)
    hi = comp.max(axis=0)
    q = w @ comp
    logk = gammaln(0.5 * (C + 1.0)) - gammaln(0.5 * C) - 0.5 * np.log(C * np.pi) - np.log(S)
    active = np.flatnonzero(hi > lo)
    for _ in range(max_iter):
        if active.size == 0:
            break
        a, s, c, k = A[:, active], S[:, active], C[:, active], logk[:, active]
        x = q[active]
        z = (x[None, :] - a) / s
        F = w @ stdtr(c, z) - p
        f = w @ np.exp(k - 0.5 * (c + 1.0) * np.log1p(z * z / c))
        below = F < 0
        lo[active] = np.where(below, x, lo[active])
        hi[active] = np.where(below, hi[active], x)
        with np.errstate(divide="ignore", invalid="ignore"):
            nxt = x - F / f
        l, h = lo[active], hi[active]
        bad = ~((nxt > l) & (nxt < h))
        nxt = np.where(bad, 0.5 * (l + h), nxt)
        q[active] = nxt
        done = (np.abs(F) <= tol) | (h - l <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(x)))
        q[active[done]] = x[done]
        active = active[~done]
    return q


def bayes_factor(a: Cloud, b: Cloud) -> float:
    """Log Bayes factor of cloud ``a`` against ``b`` run on the same data.

    Both runs must have used the same observations in the same order and
    the same conditioning prefix ``t0``.
    """
    if a.t0 != b.t0:
        raise ValueError(f"conditioning prefixes differ (t0={a.t0} vs {b.t0})")
    if a.store.n != b.store.n or not (
        np.array_equal(a.store.X, b.store.X) and np.array_equal(a.store.y, b.store.y)
    ):
        raise ValueError("runs did not see the same data in the same order")
    return a.log_ml - b.log_ml


def posterior_probability(log_bf: float) -> float:
    """Posterior probability of model A under even prior odds."""
    return float(expit(log_bf))
