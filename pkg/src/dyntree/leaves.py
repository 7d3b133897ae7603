"""Conjugate leaf regression models.

Three models are provided, each summarised by sufficient statistics that
can be updated one observation at a time, merged, and turned into exact
log marginal likelihoods and posterior predictives:

* :class:`ConstantLeaf` - Gaussian responses with unknown mean and variance
  under the scale-invariant prior ``1/sigma^2``.
* :class:`LinearLeaf` - Gaussian linear regression on the covariates under
  the same improper prior.
* :class:`MultinomialLeaf` - class labels with a ``Dirichlet(1/C, ..., 1/C)``
  prior on the class probabilities.

Statistics are flat float vectors (the layouts are documented in
``_pykernels``) so the compiled core can update them without Python
overhead.  They are treated as immutable values: every update returns a new
vector.  :meth:`summary` gives a named view for inspection.  Undefined
marginals (too few points, no residual spread, a singular Gram matrix) are
reported as ``-inf``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, stdtr, stdtrit

from . import kernels
from .kernels import CONSTANT, LINEAR, MULTINOMIAL, linear_slices

class StudentT:
    """Location-scale Student-t with location ``a``, squared scale ``b`` and ``c`` d.o.f."""

    __slots__ = ("a", "b", "c")

    def __init__(self, a: float, b: float, c: float):
        self.a = float(a)
        self.b = float(b)
        self.c = float(c)

    def __repr__(self) -> str:
        return f"StudentT(a={self.a:.6g}, b={self.b:.6g}, c={self.c:.6g})"

    @property
    def mean(self) -> float:
        return self.a if self.c > 1 else math.nan

    @property
    def var(self) -> float:
        if self.c > 2:
            return self.b * self.c / (self.c - 2.0)
        return math.inf if self.c > 1 else math.nan

    def logpdf(self, y):
        return t_logpdf(y, self.a, self.b, self.c)

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def cdf(self, q):
        return stdtr(self.c, (np.asarray(q, dtype=float) - self.a) / math.sqrt(self.b))

    def ppf(self, p):
        return self.a + math.sqrt(self.b) * stdtrit(self.c, np.asarray(p, dtype=float))


def t_logpdf(y, a, b, c):
    """Log density of ``St(a, b, c)``; vectorised over all arguments."""
    y, a, b, c = (np.asarray(v, dtype=float) for v in (y, a, b, c))
    z = (y - a) ** 2 / (c * b)
    out = gammaln(0.5 * (c + 1.0)) - gammaln(0.5 * c) - 0.5 * np.log(c * math.pi * b) - 0.5 * (c + 1.0) * np.log1p(z)
    return out if out.ndim else float(out)


def _check_min_leaf(k) -> int:
    if int(k) != k or k < 1:
        raise ValueError(f"min_leaf must be a positive integer, got {k!r}")
    return int(k)


class _LeafModel:
    """Shared plumbing: every statistic operation runs in the kernel backend."""

    kind: str
    code: int
    real: bool
    min_leaf: int

    @property
    def spec(self) -> tuple[int, int, int, int]:
        """``(kind code, d, n_classes, min_leaf)`` as used by the particle core."""
        return (self.code, self._d, self._C, self.min_leaf)

    def empty(self) -> np.ndarray:
        return np.zeros(kernels.stats_size(self.code, self._d, self._C))

    def batch(self, X, y) -> np.ndarray:
        """Statistics of a set of rows computed from scratch."""
        y = np.asarray(y, dtype=float).reshape(-1)
        X = np.asarray(X, dtype=float).reshape(y.shape[0], self._d) if self.code == LINEAR else None
        return kernels.stats_batch(self.code, self._d, self._C, X, y)

    def update(self, s, x, y) -> np.ndarray:
        """Statistics after adding one observation."""
        x = np.asarray(x, dtype=float).reshape(-1) if self.code == LINEAR else None
        return kernels.stats_update(self.code, self._d, self._C, s, x, float(y))

    def merge(self, a, b) -> np.ndarray:
        """Statistics of the union of two disjoint row sets."""
        return kernels.stats_merge(self.code, self._d, self._C, a, b)

    def defined(self, s) -> bool:
        return bool(kernels.stats_defined(self.code, self._d, self._C, s))

    def log_marginal(self, s) -> float:
        return float(kernels.stats_lml(self.code, self._d, self._C, s))

    def log_predictive(self, s, x, y) -> float:
        x = np.asarray(x, dtype=float).reshape(-1) if self.code == LINEAR else None
        return float(kernels.log_predictive(self.code, self._d, self._C, s, x, float(y)))

    def n(self, s) -> int:
        return int(s[0])

    def stats_to_dict(self, s) -> list:
        return np.asarray(s, dtype=float).tolist()

    def stats_from_dict(self, p) -> np.ndarray:
        out = np.array(p, dtype=float)
        if out.shape != (kernels.stats_size(self.code, self._d, self._C),):
            raise ValueError(f"statistics vector has the wrong length for {self!r}")
        return out


# ---------------------------------------------------------------------------
# constant mean


class ConstantLeaf(_LeafModel):
    """Constant-mean Gaussian leaves."""

    kind = "constant"
    code = CONSTANT
    real = True
    min_rows = 3

    def __init__(self, d: int | None = None, min_leaf: int = 3):
        self.min_leaf = _check_min_leaf(min_leaf)
        self.d = d
        self._d = 1 if d is None else int(d)
        self._C = 0

    def __repr__(self) -> str:
        return "ConstantLeaf()"

    def default_t0(self) -> int:
        return 5

    def summary(self, s) -> dict:
        """``n``, ``ybar``, ``s2`` (centred sum of squares) and ``sum_y2``."""
        return {"n": int(s[0]), "ybar": float(s[1]), "s2": float(s[2]), "sum_y2": float(s[3])}

    def _pred(self, s, noise: bool):
        if not self.defined(s):
            return math.nan, math.nan, math.nan
        n = s[0]
        c = n - 1.0
        scale = (1.0 + 1.0 / n) if noise else 1.0 / n
        return float(s[1]), float(scale * s[2] / c), float(c)

    def predictive(self, s, x=None) -> StudentT:
        return StudentT(*self._pred(s, True))

    def mean_posterior(self, s, x=None) -> StudentT:
        return StudentT(*self._pred(s, False))

    def predictive_params(self, s, X, noise: bool = True):
        """Arrays ``(a, b, c)`` of the predictive (or mean posterior) at rows of ``X``."""
        m = len(X)
        a, b, c = self._pred(s, noise)
        return np.full(m, a), np.full(m, b), np.full(m, c)

    def predictive_rows(self, S, X, noise: bool = True):
        """Like :meth:`predictive_params` with one statistics row per input."""
        S = np.asarray(S, dtype=float)
        n, ss, sq = S[:, 0], S[:, 2], S[:, 3]
        ok = (n >= 3) & (ss > kernels.REL_SS_TOL * sq)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = n - 1.0
            scale = (1.0 + 1.0 / n) if noise else 1.0 / n
            b = scale * ss / c
        nan = np.nan
        return np.where(ok, S[:, 1], nan), np.where(ok, b, nan), np.where(ok, c, nan)

    def variance_reduction(self, s, x, x_prime) -> float:
        """Drop in predictive variance at ``x_prime`` from one more point at ``x``."""
        n = s[0]
        if n < 4 or not self.defined(s):
            return math.nan
        inv_n = 1.0 / n
        return float(s[2] / (n - 3.0) * inv_n * inv_n / (1.0 + inv_n))

    def variance_reduction_matrix(self, s, Xc, Xr):
        """Reductions for every (candidate, reference) pair in one leaf."""
        return np.full((len(Xc), len(Xr)), self.variance_reduction(s, None, None))

    def variance_reduction_rows(self, S, Xc, Xr):
        """Reductions at every reference row from each candidate row.

        Row ``i`` of the result uses statistics ``S[i]`` and candidate
        ``Xc[i]``; undefined entries are ``nan``.
        """
        S = np.asarray(S, dtype=float)
        n, ss, sq = S[:, 0], S[:, 2], S[:, 3]
        ok = (n >= 4) & (ss > kernels.REL_SS_TOL * sq)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_n = 1.0 / n
            v = np.where(ok, ss / (n - 3.0) * inv_n * inv_n / (1.0 + inv_n), np.nan)
        return np.repeat(v[:, None], len(Xr), axis=1)

    def prefix_lml(self, X, y):
        return kernels.prefix_lml_constant(y)


# ---------------------------------------------------------------------------
# linear mean


class LinearLeaf(_LeafModel):
    """Linear-mean Gaussian leaves on ``d`` covariates."""

    kind = "linear"
    code = LINEAR
    real = True

    def __init__(self, d: int, min_leaf: int | None = None):
        if d < 1:
            raise ValueError("linear leaves need at least one covariate")
        self.d = int(d)
        self._d = self.d
        self._C = 0
        self.min_rows = self.d + 2
        self.min_leaf = _check_min_leaf(self.min_rows if min_leaf is None else min_leaf)
        self._slices = linear_slices(self.d)

    def __repr__(self) -> str:
        return f"LinearLeaf(d={self.d})"

    def default_t0(self) -> int:
        return self.d + 3

    def summary(self, s) -> dict:
        """Named fields: ``n``, ``ybar``, ``s2``, ``xbar``, ``G``, ``gxy``, ``G_inv``, ``b_hat``, ``R``, ``logdet``.

        ``G_inv``, ``b_hat`` and ``R`` are ``None`` when the Gram matrix has
        no usable inverse.
        """
        sx, sg, sb, sG, sGi = self._slices
        d = self.d
        ok = s[3] > 0.0
        return {
            "n": int(s[0]),
            "ybar": float(s[1]),
            "s2": float(s[2]),
            "xbar": np.array(s[sx]),
            "G": np.array(s[sG]).reshape(d, d),
            "gxy": np.array(s[sg]),
            "G_inv": np.array(s[sGi]).reshape(d, d) if ok else None,
            "b_hat": np.array(s[sb]) if ok else None,
            "R": float(s[5]) if ok else None,
            "logdet": float(s[4]) if ok else None,
        }

    def _parts(self, s):
        sx, sg, sb, sG, sGi = self._slices
        return s[sx], s[sb], np.asarray(s[sGi]).reshape(self.d, self.d)

    def predictive_params(self, s, X, noise: bool = True):
        X = np.asarray(X, dtype=float).reshape(-1, self.d)
        m = X.shape[0]
        if not self.defined(s):
            nan = np.full(m, np.nan)
            return nan, nan, nan
        xbar, bhat, Ginv = self._parts(s)
        xh = X - xbar
        n = s[0]
        k = n - self.d - 1.0
        q = np.einsum("ij,jk,ik->i", xh, Ginv, xh)
        scale = (1.0 if noise else 0.0) + 1.0 / n + q
        return s[1] + xh @ bhat, scale * (s[2] - s[5]) / k, np.full(m, k)

    def predictive_rows(self, S, X, noise: bool = True):
        """Like :meth:`predictive_params` with one statistics row per input."""
        S = np.asarray(S, dtype=float)
        X = np.asarray(X, dtype=float).reshape(-1, self.d)
        d = self.d
        sx, sg, sb, sG, sGi = self._slices
        n, syy, R = S[:, 0], S[:, 2], S[:, 5]
        ok = (n >= d + 2) & (S[:, 3] > 0) & (syy - R > kernels.REL_FIT_TOL * syy)
        xh = X - S[:, sx]
        q = np.einsum("ij,ijk,ik->i", xh, S[:, sGi].reshape(-1, d, d), xh)
        with np.errstate(divide="ignore", invalid="ignore"):
            k = n - d - 1.0
            b = ((1.0 if noise else 0.0) + 1.0 / n + q) * (syy - R) / k
        a = S[:, 1] + np.einsum("ij,ij->i", xh, S[:, sb])
        nan = np.nan
        return np.where(ok, a, nan), np.where(ok, b, nan), np.where(ok, k, nan)

    def predictive(self, s, x) -> StudentT:
        a, b, c = self.predictive_params(s, np.atleast_2d(x), True)
        return StudentT(a[0], b[0], c[0])

    def mean_posterior(self, s, x) -> StudentT:
        a, b, c = self.predictive_params(s, np.atleast_2d(x), False)
        return StudentT(a[0], b[0], c[0])

    def variance_reduction(self, s, x, x_prime) -> float:
        out = self.variance_reduction_matrix(s, np.atleast_2d(x), np.atleast_2d(x_prime))
        return float(out[0, 0])

    def variance_reduction_matrix(self, s, Xc, Xr):
        Xc = np.asarray(Xc, dtype=float).reshape(-1, self.d)
        Xr = np.asarray(Xr, dtype=float).reshape(-1, self.d)
        n = s[0]
        if n <= self.d + 3 or not self.defined(s):
            return np.full((len(Xc), len(Xr)), np.nan)
        xbar, _, Ginv = self._parts(s)
        hc = Xc - xbar
        hr = Xr - xbar
        inv_n = 1.0 / n
        cross = inv_n + hc @ Ginv @ hr.T
        self_term = 1.0 + inv_n + np.einsum("ij,jk,ik->i", hc, Ginv, hc)
        return (s[2] - s[5]) / (n - self.d - 3.0) * cross**2 / self_term[:, None]

    def variance_reduction_rows(self, S, Xc, Xr):
        """Reductions at every reference row from each candidate row.

        Row ``i`` of the result uses statistics ``S[i]`` and candidate
        ``Xc[i]``; undefined entries are ``nan``.
        """
        S = np.asarray(S, dtype=float)
        d = self.d
        Xc = np.asarray(Xc, dtype=float).reshape(-1, d)
        Xr = np.asarray(Xr, dtype=float).reshape(-1, d)
        sx, sg, sb, sG, sGi = self._slices
        n, syy, R = S[:, 0], S[:, 2], S[:, 5]
        ok = (n > d + 3) & (S[:, 3] > 0) & (syy - R > kernels.REL_FIT_TOL * syy)
        xbar = S[:, sx]
        Ginv = S[:, sGi].reshape(-1, d, d)
        hc = Xc - xbar
        hr = Xr[None, :, :] - xbar[:, None, :]
        gc = np.einsum("ij,ijk->ik", hc, Ginv)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_n = 1.0 / n
            cross = inv_n[:, None] + np.einsum("ik,irk->ir", gc, hr)
            self_term = 1.0 + inv_n + np.einsum("ik,ik->i", gc, hc)
            scale = (syy - R) / (n - d - 3.0)
            out = (scale / self_term)[:, None] * cross**2
        out[~ok] = np.nan
        return out

    def prefix_lml(self, X, y):
        return kernels.prefix_lml_linear(X, y)


# ---------------------------------------------------------------------------
# multinomial


class MultinomialLeaf(_LeafModel):
    """Multinomial leaves with a ``Dirichlet(1/C)`` prior."""

    kind = "multinomial"
    code = MULTINOMIAL
    real = False
    min_rows = 1

    def __init__(self, n_classes: int, min_leaf: int = 1):
        self.min_leaf = _check_min_leaf(min_leaf)
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.n_classes = int(n_classes)
        self._d = 1
        self._C = self.n_classes

    def __repr__(self) -> str:
        return f"MultinomialLeaf(n_classes={self.n_classes})"

    def default_t0(self) -> int:
        return 1

    def summary(self, s) -> dict:
        return {"n": int(s[0]), "z": np.array(s[1:])}

    def p_hat(self, s) -> np.ndarray:
        """Posterior mean class probabilities ``(z + 1/C) / (n + 1)``."""
        return (np.asarray(s[1:]) + 1.0 / self.n_classes) / (s[0] + 1.0)

    def p_hat_rows(self, S) -> np.ndarray:
        S = np.asarray(S, dtype=float)
        return (S[:, 1:] + 1.0 / self.n_classes) / (S[:, :1] + 1.0)

    def predictive(self, s, x=None) -> np.ndarray:
        return self.p_hat(s)

    def prefix_lml(self, X, y):
        return kernels.prefix_lml_multinomial(y, self.n_classes)


def make_model(kind: str, d: int = 1, n_classes: int | None = None, min_leaf: int | None = None):
    """Build a leaf model by name: ``constant``, ``linear`` or ``multinomial``.

    ``min_leaf`` overrides the model's default minimum leaf size.
    """
    kw = {} if min_leaf is None else {"min_leaf": min_leaf}
    if kind == "constant":
        return ConstantLeaf(d, **kw)
    if kind == "linear":
        return LinearLeaf(d, **kw)
    if kind == "multinomial":
        if n_classes is None:
            raise ValueError("multinomial leaves need n_classes")
        return MultinomialLeaf(n_classes, **kw)
    raise ValueError(f"unknown leaf model {kind!r}")


def model_to_dict(model) -> dict:
    return {
        "kind": model.kind,
        "d": getattr(model, "d", None),
        "n_classes": getattr(model, "n_classes", None),
        "min_leaf": model.min_leaf,
    }


def model_from_dict(p: dict):
    return make_model(p["kind"], p.get("d") or 1, p.get("n_classes"), p.get("min_leaf"))
