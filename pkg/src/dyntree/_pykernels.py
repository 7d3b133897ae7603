"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
here with typed loops.  Both must agree to rounding error.
"""

import numpy as np
from scipy.special import gammaln

LOG_2PI = float(np.log(2.0 * np.pi))
# constant leaves: s^2 at or below this fraction of sum(y^2) means no spread
REL_SS_TOL = 1e-13
# linear leaves: s^2 - R at or below this fraction of s^2 means an exact fit
REL_FIT_TOL = 1e-10
COND_MAX = 1e12
# N w within this of an integer counts as that integer when resampling
SNAP_TOL = 1e-9

NAME = "python"


def route(dims, values, left, right, X):
    """Leaf index of every row of ``X`` in a flattened tree.

    ``dims[i] < 0`` marks node ``i`` as a leaf; internal nodes send
    ``x[dims[i]] <= values[i]`` to ``left[i]`` and the rest to ``right[i]``.
    """
    X = np.asarray(X, dtype=float)
    node = np.zeros(X.shape[0], dtype=np.intp)
    active = np.flatnonzero(dims[node] >= 0)
    while active.size:
        nd = node[active]
        go_left = X[active, dims[nd]] <= values[nd]
        node[active] = np.where(go_left, left[nd], right[nd])
        active = active[dims[node[active]] >= 0]
    return node


def residual_resample(w, u):
    """Residual resampling of normalized weights ``w``.

    Particle ``i`` is copied ``floor(N w_i)`` times; the remaining slots are
    filled by inverse-CDF draws on the residual weights using the leading
    entries of the uniforms ``u``.  Values of ``N w_i`` within ``SNAP_TOL``
    below an integer are rounded up, so equal weights copy every particle
    once whatever the rounding in ``w``.
    """
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    nw = n * w
    counts = np.floor(nw + SNAP_TOL).astype(np.intp)
    idx = np.repeat(np.arange(n, dtype=np.intp), counts)
    rest = n - idx.shape[0]
    if rest > 0:
        cdf = np.cumsum(np.maximum(nw - counts, 0.0))
        draws = np.searchsorted(cdf, np.asarray(u[:rest]) * cdf[-1], side="right")
        idx = np.concatenate([idx, np.minimum(draws, n - 1)])
    return idx[:n]


def prefix_lml_constant(y):
    """Log marginal likelihood of each prefix ``y[:k]`` under constant leaves.

    Entry ``k`` of the result (``k = 0..m``) is ``-inf`` when the prefix is
    too short (``k < 3``) or has no spread.
    """
    y = np.asarray(y, dtype=float)
    m = y.shape[0]
    out = np.full(m + 1, -np.inf)
    if m < 3:
        return out
    shift = y.mean()
    c = y - shift
    k = np.arange(1, m + 1, dtype=float)
    s = np.cumsum(c)
    q = np.cumsum(c * c)
    s2 = q - s * s / k
    ref = np.cumsum(y * y)
    ok = (k >= 3) & (s2 > REL_SS_TOL * ref)
    kk = k[ok]
    half = 0.5 * (kk - 1.0)
    out[1:][ok] = -half * LOG_2PI - 0.5 * np.log(kk) - half * np.log(0.5 * s2[ok]) + gammaln(half)
    return out


def prefix_lml_linear(X, y):
    """Log marginal likelihood of each prefix under linear leaves."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m, d = X.shape
    out = np.full(m + 1, -np.inf)
    if m < d + 2:
        return out
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    k = np.arange(1, m + 1, dtype=float)
    sx = np.cumsum(xc, axis=0)
    sy = np.cumsum(yc)
    sxx = np.cumsum(xc[:, :, None] * xc[:, None, :], axis=0)
    sxy = np.cumsum(xc * yc[:, None], axis=0)
    syy_raw = np.cumsum(yc * yc)
    sel = np.arange(d + 1, m)  # prefix sizes k = d+2..m
    kk = k[sel]
    xb = sx[sel] / kk[:, None]
    yb = sy[sel] / kk
    G = sxx[sel] - kk[:, None, None] * xb[:, :, None] * xb[:, None, :]
    gxy = sxy[sel] - kk[:, None] * xb * yb[:, None]
    syy = syy_raw[sel] - kk * yb * yb
    evals, evecs = np.linalg.eigh(G)
    pos = evals[:, 0] > 0
    safe = np.where(pos[:, None], evals, 1.0)
    Ginv = np.einsum("kij,kj,klj->kil", evecs, 1.0 / safe, evecs)
    cond = np.abs(G).sum(axis=1).max(axis=1) * np.abs(Ginv).sum(axis=1).max(axis=1)
    b = np.einsum("kij,kj->ki", Ginv, gxy)
    R = np.einsum("ki,ki->k", b, gxy)
    s2r = syy - R
    ok = pos & (cond <= COND_MAX) & (s2r > REL_FIT_TOL * syy)
    logdet = np.log(safe).sum(axis=1)
    half = 0.5 * (kk - d - 1.0)
    val = (
        -half * LOG_2PI
        - 0.5 * logdet
        - 0.5 * np.log(kk)
        - half * np.log(0.5 * np.where(ok, s2r, 1.0))
        + gammaln(half)
    )
    out[sel + 1] = np.where(ok, val, -np.inf)
    return out


def prefix_lml_multinomial(labels, n_classes):
    """Log marginal probability of each prefix of a class-label sequence."""
    labels = np.asarray(labels, dtype=np.intp)
    m = labels.shape[0]
    out = np.zeros(m + 1)
    if m == 0:
        return out
    onehot = np.zeros((m, n_classes))
    onehot[np.arange(m), labels] = 1.0
    before = np.cumsum(onehot, axis=0)[np.arange(m), labels] - 1.0
    k = np.arange(1, m + 1, dtype=float)
    out[1:] = np.cumsum(np.log((before + 1.0 / n_classes) / k))
    return out


# ---------------------------------------------------------------------------
# leaf sufficient statistics as flat vectors
#
# constant:    [n, mean, ss, sumsq]
# linear:      [n, ybar, syy, ok, logdet, R, xbar(d), gxy(d), bhat(d), G(d*d), Ginv(d*d)]
#              ok = 1 when Ginv holds a usable inverse of G
# multinomial: [n, z(C)]

CONSTANT, LINEAR, MULTINOMIAL = 0, 1, 2


def stats_size(kind, d, C):
    if kind == CONSTANT:
        return 4
    if kind == LINEAR:
        return 6 + 3 * d + 2 * d * d
    return 1 + C


def linear_slices(d):
    """Slices of ``xbar``, ``gxy``, ``bhat``, ``G`` and ``Ginv`` in a linear vector."""
    o = 6
    return (
        slice(o, o + d),
        slice(o + d, o + 2 * d),
        slice(o + 2 * d, o + 3 * d),
        slice(o + 3 * d, o + 3 * d + d * d),
        slice(o + 3 * d + d * d, o + 3 * d + 2 * d * d),
    )


def gram_inverse(G):
    """``(Ginv, logdet)`` of a symmetric matrix, or ``None`` if not safely invertible."""
    d = G.shape[0]
    L = np.zeros((d, d))
    for j in range(d):
        s = G[j, j] - L[j, :j] @ L[j, :j]
        if not s > 0.0:
            return None
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, d):
            L[i, j] = (G[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
    Linv = np.linalg.solve(L, np.eye(d)) if d > 1 else 1.0 / L
    Ginv = Linv.T @ Linv
    if _cond1(G, Ginv) > COND_MAX:
        return None
    return Ginv, float(2.0 * np.log(np.diag(L)).sum())


def _cond1(G, Ginv):
    return float(np.abs(G).sum(axis=0).max() * np.abs(Ginv).sum(axis=0).max())


def _linear_finish(s, d, inv):
    sx, sg, sb, sG, sGi = linear_slices(d)
    if inv is None:
        s[3] = 0.0
        s[4] = 0.0
        s[5] = 0.0
        s[sb] = 0.0
        s[sGi] = 0.0
        return s
    Ginv, logdet = inv
    s[3] = 1.0
    s[4] = logdet
    s[sGi] = Ginv.reshape(-1)
    b = Ginv @ s[sg]
    s[sb] = b
    s[5] = float(b @ s[sg])
    return s


def stats_batch(kind, d, C, X, y):
    """Statistics of the rows ``X``, ``y`` from scratch."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    s = np.zeros(stats_size(kind, d, C))
    if kind == MULTINOMIAL:
        s[0] = n
        s[1:] = np.bincount(y.astype(np.intp), minlength=C)[:C]
        return s
    if n == 0:
        return s
    if kind == CONSTANT:
        mean = float(y.mean())
        s[:] = (n, mean, float(((y - mean) ** 2).sum()), float((y * y).sum()))
        return s
    X = np.asarray(X, dtype=float).reshape(n, d)
    sx, sg, sb, sG, sGi = linear_slices(d)
    xbar = X.mean(axis=0)
    ybar = float(y.mean())
    Xc = X - xbar
    yc = y - ybar
    G = Xc.T @ Xc
    s[0] = n
    s[1] = ybar
    s[2] = float(yc @ yc)
    s[sx] = xbar
    s[sg] = Xc.T @ yc
    s[sG] = G.reshape(-1)
    return _linear_finish(s, d, gram_inverse(G) if n >= d + 1 else None)


def stats_update(kind, d, C, s, x, y):
    """Statistics with one more observation ``(x, y)``; ``s`` is not modified."""
    out = np.array(s, dtype=float)
    y = float(y)
    n = out[0]
    n1 = n + 1.0
    if kind == CONSTANT:
        delta = y - out[1]
        mean = out[1] + delta / n1
        out[0] = n1
        out[1] = mean
        out[2] += delta * (y - mean)
        out[3] += y * y
        return out
    if kind == MULTINOMIAL:
        out[0] = n1
        out[1 + int(y)] += 1.0
        return out
    sx, sg, sb, sG, sGi = linear_slices(d)
    x = np.asarray(x, dtype=float)
    f = n / n1
    dx = x - out[sx]
    dy = y - out[1]
    G = out[sG].reshape(d, d) + f * np.outer(dx, dx)
    out[sG] = G.reshape(-1)
    out[sg] += f * dx * dy
    out[2] += f * dy * dy
    out[sx] += dx / n1
    out[1] += dy / n1
    out[0] = n1
    inv = None
    if s[3] > 0.0:
        u = np.sqrt(f) * dx
        Ginv_old = np.asarray(s[sGi]).reshape(d, d)
        gu = Ginv_old @ u
        den = 1.0 + float(u @ gu)
        Ginv = Ginv_old - np.outer(gu, gu) / den
        if _cond1(G, Ginv) <= COND_MAX:
            inv = (Ginv, float(s[4]) + float(np.log(den)))
        else:
            inv = gram_inverse(G)
    elif n1 >= d + 1:
        inv = gram_inverse(G)
    return _linear_finish(out, d, inv)


def stats_merge(kind, d, C, a, b):
    """Statistics of the union of two disjoint row sets."""
    if a[0] == 0:
        return np.array(b, dtype=float)
    if b[0] == 0:
        return np.array(a, dtype=float)
    if kind == MULTINOMIAL:
        return np.asarray(a, dtype=float) + np.asarray(b, dtype=float)
    na, nb = a[0], b[0]
    n = na + nb
    out = np.zeros(stats_size(kind, d, C))
    if kind == CONSTANT:
        delta = b[1] - a[1]
        out[0] = n
        out[1] = a[1] + delta * nb / n
        out[2] = a[2] + b[2] + delta * delta * na * nb / n
        out[3] = a[3] + b[3]
        return out
    sx, sg, sb, sG, sGi = linear_slices(d)
    dx = b[sx] - a[sx]
    dy = b[1] - a[1]
    f = na * nb / n
    G = (a[sG] + b[sG]).reshape(d, d) + f * np.outer(dx, dx)
    out[0] = n
    out[1] = a[1] + dy * nb / n
    out[2] = a[2] + b[2] + f * dy * dy
    out[sx] = a[sx] + dx * nb / n
    out[sg] = a[sg] + b[sg] + f * dx * dy
    out[sG] = G.reshape(-1)
    return _linear_finish(out, d, gram_inverse(G) if n >= d + 1 else None)


def stats_defined(kind, d, C, s):
    """Whether the leaf marginal likelihood and predictive are proper."""
    if kind == CONSTANT:
        return s[0] >= 3 and s[2] > REL_SS_TOL * s[3]
    if kind == LINEAR:
        return s[0] >= d + 2 and s[3] > 0.0 and s[2] - s[5] > REL_FIT_TOL * s[2]
    return True


def stats_lml(kind, d, C, s):
    """Leaf log marginal likelihood, ``-inf`` when undefined."""
    if kind == MULTINOMIAL:
        alpha = 1.0 / C
        return float(gammaln(np.asarray(s[1:]) + alpha).sum() - C * gammaln(alpha) - gammaln(s[0] + 1.0))
    if not stats_defined(kind, d, C, s):
        return -np.inf
    n = s[0]
    if kind == CONSTANT:
        half = 0.5 * (n - 1.0)
        return float(-half * LOG_2PI - 0.5 * np.log(n) - half * np.log(0.5 * s[2]) + gammaln(half))
    half = 0.5 * (n - d - 1.0)
    return float(
        -half * LOG_2PI - 0.5 * s[4] - 0.5 * np.log(n) - half * np.log(0.5 * (s[2] - s[5])) + gammaln(half)
    )


def t_logpdf(y, a, b, c):
    """Log density of the Student-t with location ``a``, scale ``b`` and ``c`` df."""
    z = (y - a) * (y - a) / (c * b)
    return float(
        gammaln(0.5 * (c + 1.0)) - gammaln(0.5 * c) - 0.5 * np.log(c * np.pi * b) - 0.5 * (c + 1.0) * np.log1p(z)
    )


def log_predictive(kind, d, C, s, x, y):
    """Log one-step predictive density (or probability) of ``y`` at ``x``."""
    if kind == MULTINOMIAL:
        return float(np.log((s[1 + int(y)] + 1.0 / C) / (s[0] + 1.0)))
    if not stats_defined(kind, d, C, s):
        return -np.inf
    n = s[0]
    if kind == CONSTANT:
        c = n - 1.0
        return t_logpdf(float(y), s[1], (1.0 + 1.0 / n) * s[2] / c, c)
    sx, sg, sb, sG, sGi = linear_slices(d)
    xh = np.asarray(x, dtype=float) - s[sx]
    c = n - d - 1.0
    q = float(xh @ np.asarray(s[sGi]).reshape(d, d) @ xh)
    a = s[1] + float(xh @ s[sb])
    return t_logpdf(float(y), a, (1.0 + 1.0 / n + q) * (s[2] - s[5]) / c, c)
