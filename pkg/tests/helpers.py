"""Shared test helpers and independent oracles."""

import math

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from dyntree import ConstantLeaf, DataStore, TreePrior, make_model
from dyntree.tree import TreeOps, leaves


def make_ops(X, y, model, prior=None, n_classes=None):
    """TreeOps over a fresh store holding ``X, y``."""
    store = DataStore.from_arrays(X, y, n_classes=n_classes)
    return TreeOps(store, model, prior or TreePrior())


def constant_lml_oracle(y):
    """Log of the double integral over mean and log variance, by quadrature."""
    y = np.asarray(y, dtype=float)
    n = y.size
    ybar = y.mean()
    s2 = ((y - ybar) ** 2).sum()
    # centre the integrand on its mode so the quadrature sees O(1) values
    tau0 = math.log(s2 / n)
    def log_f(mu, tau):
        v = math.exp(tau)
        return -0.5 * n * math.log(2 * math.pi * v) - ((y - mu) ** 2).sum() / (2 * v)
    ref = log_f(ybar, tau0)
    val, _ = integrate.dblquad(
        lambda mu, tau: math.exp(log_f(mu, tau) - ref),
        tau0 - 30, tau0 + 60,
        lambda tau: ybar - 40 * math.sqrt(math.exp(tau) / n),
        lambda tau: ybar + 40 * math.sqrt(math.exp(tau) / n),
        epsabs=0, epsrel=1e-10,
    )
    return ref + math.log(val)


def linear_lml_oracle(X, y):
    """Closed form from an independent least-squares fit with an intercept column."""
    n, d = X.shape
    A = np.column_stack([np.ones(n), X])
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    rss = float(((y - A @ beta) ** 2).sum())
    half = 0.5 * (n - d - 1)
    _, logdet = np.linalg.slogdet(A.T @ A)
    return -half * math.log(2 * math.pi) - 0.5 * logdet + gammaln(half) - half * math.log(rss / 2)


def random_case(rng, kind):
    d = int(rng.integers(1, 4))
    C = int(rng.integers(2, 5))
    model = make_model(kind, d, C)
    n = int(rng.integers(model.min_rows + 2, 31))
    X = rng.normal(size=(n, d))
    if kind == "multinomial":
        y = rng.integers(0, C, n)
    else:
        y = X @ rng.normal(size=d) + rng.normal(size=n) * rng.uniform(0.1, 3)
    return model, X, y


def rel_close(a, b, tol):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.abs(b), 1.0)
    return np.all(np.abs(a - b) <= tol * scale)


def random_tree(rng, n=40, d=2, max_depth=4):
    """A random tree over uniform data with row counts unconstrained."""
    X = rng.random((n, d))
    y = rng.normal(size=n)
    ops = make_ops(X, y, ConstantLeaf(d, min_leaf=1))

    def spec(depth, lo, hi):
        if depth >= max_depth or rng.random() < 0.35:
            return None
        j = int(rng.integers(d))
        v = float(rng.uniform(lo[j], hi[j]))
        l_hi, r_lo = hi.copy(), lo.copy()
        l_hi[j] = v
        r_lo[j] = v
        return (j, v, spec(depth + 1, lo, l_hi), spec(depth + 1, r_lo, hi))

    return ops, ops.build(spec(0, np.zeros(d), np.ones(d)), np.arange(n))


def leaf_sets(root):
    return sorted(tuple(sorted(l.rows.tolist())) for l in leaves(root))
