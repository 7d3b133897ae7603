# cython: language_level=3
"""Compiled twin of ``_pykernels`` and ``_pycore``.

Same functions, signatures and return conventions as the Python modules.
Prefix scans use streaming (Welford) updates instead of shifted cumulative
sums and Gram inverses come from a hand-written Cholesky factorisation, so
results agree with the Python backend to rounding error.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, M_PI, exp, fabs, floor, lgamma, log, log1p, nextafter, sqrt
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy

cnp.import_array()

REL_SS_TOL = 1e-13
REL_FIT_TOL = 1e-10
COND_MAX = 1e12
SNAP_TOL = 1e-9
NAME = "cython"
CONSTANT = 0
LINEAR = 1
MULTINOMIAL = 2
LEAF = -1
STAY = 0
PRUNE = 1
GROW = 2

cdef double _REL_SS_TOL = 1e-13
cdef double _REL_FIT_TOL = 1e-10
cdef double _COND_MAX = 1e12
cdef double _SNAP_TOL = 1e-9
cdef double _LOG_2PI = log(2.0 * M_PI)
cdef double _NEG_INF = -INFINITY


# ---------------------------------------------------------------------------
# small helpers


cdef inline double* _dptr(object arr):
    return <double*>cnp.PyArray_DATA(arr)


cdef inline cnp.intp_t* _iptr(object arr):
    return <cnp.intp_t*>cnp.PyArray_DATA(arr)


cdef object _dempty(Py_ssize_t n):
    cdef cnp.npy_intp dims[1]
    dims[0] = n
    return cnp.PyArray_EMPTY(1, dims, cnp.NPY_DOUBLE, 0)


cdef object _dzeros(Py_ssize_t n):
    cdef cnp.npy_intp dims[1]
    dims[0] = n
    return cnp.PyArray_ZEROS(1, dims, cnp.NPY_DOUBLE, 0)


cdef object _iempty(Py_ssize_t n):
    cdef cnp.npy_intp dims[1]
    dims[0] = n
    return cnp.PyArray_EMPTY(1, dims, cnp.NPY_INTP, 0)


cdef object _dcopy(object arr):
    cdef Py_ssize_t n = cnp.PyArray_SIZE(arr)
    out = _dempty(n)
    memcpy(_dptr(out), _dptr(arr), n * sizeof(double))
    return out


cdef int _chol_inverse(const double* G, double* L, double* Ginv, Py_ssize_t d, double* logdet) noexcept nogil:
    """Cholesky-factor G into L and write G^{-1}; returns 0 if not positive definite."""
    cdef Py_ssize_t i, j, p
    cdef double s
    for i in range(d * d):
        L[i] = 0.0
    for j in range(d):
        s = G[j * d + j]
        for p in range(j):
            s -= L[j * d + p] * L[j * d + p]
        if not s > 0.0:
            return 0
        L[j * d + j] = sqrt(s)
        for i in range(j + 1, d):
            s = G[i * d + j]
            for p in range(j):
                s -= L[i * d + p] * L[j * d + p]
            L[i * d + j] = s / L[j * d + j]
    logdet[0] = 0.0
    for j in range(d):
        logdet[0] += 2.0 * log(L[j * d + j])
    # columns of G^{-1}: forward then back substitution on unit vectors
    for p in range(d):
        for i in range(d):
            s = 1.0 if i == p else 0.0
            for j in range(i):
                s -= L[i * d + j] * Ginv[j * d + p]
            Ginv[i * d + p] = s / L[i * d + i]
        for i in range(d - 1, -1, -1):
            s = Ginv[i * d + p]
            for j in range(i + 1, d):
                s -= L[j * d + i] * Ginv[j * d + p]
            Ginv[i * d + p] = s / L[i * d + i]
    return 1


cdef double _norm1(const double* A, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double best = 0.0, col
    for j in range(d):
        col = 0.0
        for i in range(d):
            col += fabs(A[i * d + j])
        if col > best:
            best = col
    return best


cdef int _fresh_inverse(const double* G, double* Ginv, Py_ssize_t d, double* logdet) noexcept nogil:
    cdef double* L = <double*>malloc(d * d * sizeof(double))
    cdef int ok = _chol_inverse(G, L, Ginv, d, logdet)
    free(L)
    if ok and _norm1(G, d) * _norm1(Ginv, d) > _COND_MAX:
        ok = 0
    return ok


# ---------------------------------------------------------------------------
# routing and resampling


def route(dims, values, left, right, X):
    cdef const cnp.intp_t[:] dv = np.ascontiguousarray(dims, dtype=np.intp)
    cdef const double[:] vv = np.ascontiguousarray(values, dtype=np.float64)
    cdef const cnp.intp_t[:] lv = np.ascontiguousarray(left, dtype=np.intp)
    cdef const cnp.intp_t[:] rv = np.ascontiguousarray(right, dtype=np.intp)
    cdef const double[:, :] xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t m = xv.shape[0]
    cdef Py_ssize_t i, node
    out = np.empty(m, dtype=np.intp)
    cdef cnp.intp_t[:] ov = out
    for i in range(m):
        node = 0
        while dv[node] >= 0:
            if xv[i, dv[node]] <= vv[node]:
                node = lv[node]
            else:
                node = rv[node]
        ov[i] = node
    return out


def residual_resample(w, u):
    cdef const double[:] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t n = wv.shape[0]
    cdef Py_ssize_t i, j, c, pos = 0, rest, lo, hi, mid
    cdef double nw, target
    out = np.empty(n, dtype=np.intp)
    cdf = np.empty(n, dtype=np.float64)
    cdef cnp.intp_t[:] ov = out
    cdef double[:] cv = cdf
    cdef double acc = 0.0
    for i in range(n):
        nw = n * wv[i]
        c = <Py_ssize_t>floor(nw + _SNAP_TOL)
        if nw > c:
            acc += nw - c
        cv[i] = acc
        for j in range(c):
            if pos < n:
                ov[pos] = i
                pos += 1
    rest = n - pos
    for j in range(rest):
        target = uv[j] * cv[n - 1]
        lo = 0
        hi = n
        while lo < hi:
            mid = (lo + hi) // 2
            if cv[mid] <= target:
                lo = mid + 1
            else:
                hi = mid
        if lo > n - 1:
            lo = n - 1
        ov[pos] = lo
        pos += 1
    return out


# ---------------------------------------------------------------------------
# prefix log marginal likelihood scans


cdef void _scan_constant(const double* y, Py_ssize_t m, double* out) noexcept nogil:
    cdef Py_ssize_t k
    cdef double mean = 0.0, m2 = 0.0, ref = 0.0, delta, half, kk
    for k in range(m + 1):
        out[k] = _NEG_INF
    for k in range(1, m + 1):
        delta = y[k - 1] - mean
        mean += delta / k
        m2 += delta * (y[k - 1] - mean)
        ref += y[k - 1] * y[k - 1]
        if k >= 3 and m2 > _REL_SS_TOL * ref:
            kk = <double>k
            half = 0.5 * (kk - 1.0)
            out[k] = -half * _LOG_2PI - 0.5 * log(kk) - half * log(0.5 * m2) + lgamma(half)


cdef void _scan_linear(const double* X, const double* y, Py_ssize_t m, Py_ssize_t d, double* out) noexcept nogil:
    cdef Py_ssize_t k, a, b
    cdef double f, dy, ybar = 0.0, syy = 0.0, R, bh, s2r, half, kk, logdet = 0.0
    for k in range(m + 1):
        out[k] = _NEG_INF
    if m < d + 2:
        return
    cdef double* xbar = <double*>malloc(d * sizeof(double))
    cdef double* dx = <double*>malloc(d * sizeof(double))
    cdef double* gxy = <double*>malloc(d * sizeof(double))
    cdef double* G = <double*>malloc(d * d * sizeof(double))
    cdef double* Ginv = <double*>malloc(d * d * sizeof(double))
    for a in range(d):
        xbar[a] = 0.0
        gxy[a] = 0.0
        for b in range(d):
            G[a * d + b] = 0.0
    for k in range(1, m + 1):
        kk = <double>k
        f = (kk - 1.0) / kk
        dy = y[k - 1] - ybar
        for a in range(d):
            dx[a] = X[(k - 1) * d + a] - xbar[a]
            xbar[a] += dx[a] / kk
        ybar += dy / kk
        for a in range(d):
            gxy[a] += f * dx[a] * dy
            for b in range(d):
                G[a * d + b] += f * (dx[a] * dx[b])
        syy += f * dy * dy
        if k < d + 2:
            continue
        if not _fresh_inverse(G, Ginv, d, &logdet):
            continue
        R = 0.0
        for a in range(d):
            bh = 0.0
            for b in range(d):
                bh += Ginv[a * d + b] * gxy[b]
            R += bh * gxy[a]
        s2r = syy - R
        if not s2r > _REL_FIT_TOL * syy:
            continue
        half = 0.5 * (kk - d - 1.0)
        out[k] = -half * _LOG_2PI - 0.5 * logdet - 0.5 * log(kk) - half * log(0.5 * s2r) + lgamma(half)
    free(xbar)
    free(dx)
    free(gxy)
    free(G)
    free(Ginv)


cdef void _scan_multinomial(const double* y, Py_ssize_t m, Py_ssize_t C, double* out) noexcept nogil:
    cdef Py_ssize_t k, c
    cdef double alpha = 1.0 / C, acc = 0.0
    cdef double* counts = <double*>malloc(C * sizeof(double))
    for c in range(C):
        counts[c] = 0.0
    out[0] = 0.0
    for k in range(1, m + 1):
        c = <Py_ssize_t>y[k - 1]
        acc += log((counts[c] + alpha) / k)
        counts[c] += 1.0
        out[k] = acc
    free(counts)


def prefix_lml_constant(y):
    yc = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t m = yc.shape[0]
    out = _dempty(m + 1)
    _scan_constant(_dptr(yc), m, _dptr(out))
    return out


def prefix_lml_linear(X, y):
    Xc = np.ascontiguousarray(X, dtype=np.float64)
    yc = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t m = Xc.shape[0]
    out = _dempty(m + 1)
    _scan_linear(_dptr(Xc), _dptr(yc), m, Xc.shape[1], _dptr(out))
    return out


def prefix_lml_multinomial(labels, Py_ssize_t n_classes):
    yc = np.ascontiguousarray(labels, dtype=np.float64)
    cdef Py_ssize_t m = yc.shape[0]
    out = _dempty(m + 1)
    _scan_multinomial(_dptr(yc), m, n_classes, _dptr(out))
    return out


# ---------------------------------------------------------------------------
# leaf statistics vectors (layout documented in _pykernels)


cpdef Py_ssize_t stats_size(int kind, int d, int C):
    if kind == 0:
        return 4
    if kind == 1:
        return 6 + 3 * d + 2 * d * d
    return 1 + C


def linear_slices(d):
    o = 6
    return (
        slice(o, o + d),
        slice(o + d, o + 2 * d),
        slice(o + 2 * d, o + 3 * d),
        slice(o + 3 * d, o + 3 * d + d * d),
        slice(o + 3 * d + d * d, o + 3 * d + 2 * d * d),
    )


def gram_inverse(G):
    Gc = np.ascontiguousarray(G, dtype=np.float64)
    cdef Py_ssize_t d = Gc.shape[0]
    cdef double logdet = 0.0
    Ginv = np.empty((d, d))
    if not _fresh_inverse(_dptr(Gc), _dptr(Ginv), d, &logdet):
        return None
    return Ginv, logdet


cdef void _linear_finish(double* s, Py_ssize_t d, int ok) noexcept nogil:
    cdef double* gxy = s + 6 + d
    cdef double* bh = s + 6 + 2 * d
    cdef double* Gi = s + 6 + 3 * d + d * d
    cdef Py_ssize_t a, b
    cdef double acc, R = 0.0
    if not ok:
        s[3] = 0.0
        s[4] = 0.0
        s[5] = 0.0
        for a in range(d):
            bh[a] = 0.0
        for a in range(d * d):
            Gi[a] = 0.0
        return
    s[3] = 1.0
    for a in range(d):
        acc = 0.0
        for b in range(d):
            acc += Gi[a * d + b] * gxy[b]
        bh[a] = acc
        R += acc * gxy[a]
    s[5] = R


cdef object _batch(int kind, Py_ssize_t d, Py_ssize_t C, const double* X, const double* Y,
                   const cnp.intp_t* rows, Py_ssize_t n):
    cdef Py_ssize_t size = stats_size(kind, d, C), i, a, b, r
    out = _dzeros(size)
    cdef double* s = _dptr(out)
    cdef double mean = 0.0, ss = 0.0, sq = 0.0, v, dy
    cdef double* xbar
    cdef double* gxy
    cdef double* G
    cdef double* dx
    s[0] = n
    if n == 0:
        return out
    if kind == 2:
        for i in range(n):
            s[1 + <Py_ssize_t>Y[rows[i]]] += 1.0
        return out
    for i in range(n):
        mean += Y[rows[i]]
    mean /= n
    if kind == 0:
        for i in range(n):
            v = Y[rows[i]]
            ss += (v - mean) * (v - mean)
            sq += v * v
        s[1] = mean
        s[2] = ss
        s[3] = sq
        return out
    xbar = s + 6
    gxy = s + 6 + d
    G = s + 6 + 3 * d
    for i in range(n):
        r = rows[i]
        for a in range(d):
            xbar[a] += X[r * d + a]
    for a in range(d):
        xbar[a] /= n
    dx = <double*>malloc(d * sizeof(double))
    for i in range(n):
        r = rows[i]
        dy = Y[r] - mean
        ss += dy * dy
        for a in range(d):
            dx[a] = X[r * d + a] - xbar[a]
        for a in range(d):
            gxy[a] += dx[a] * dy
            for b in range(d):
                G[a * d + b] += dx[a] * dx[b]
    free(dx)
    s[1] = mean
    s[2] = ss
    cdef int ok = 0
    if n >= d + 1:
        ok = _fresh_inverse(G, G + d * d, d, &s[4])
    _linear_finish(s, d, ok)
    return out


def stats_batch(int kind, int d, int C, X, y):
    yc = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = yc.shape[0]
    Xc = np.ascontiguousarray(np.asarray(X, dtype=np.float64).reshape(n, d)) if kind == 1 else np.zeros((n, d))
    rows = np.arange(n, dtype=np.intp)
    return _batch(kind, d, C, _dptr(Xc), _dptr(yc), _iptr(rows), n)


cdef object _update(int kind, Py_ssize_t d, Py_ssize_t C, object sv, const double* x, double y):
    out = _dcopy(sv)
    cdef double* o = _dptr(out)
    cdef double n = o[0], n1 = n + 1.0, delta, mean, f, dy, den, acc
    cdef Py_ssize_t a, b
    cdef double* xbar
    cdef double* gxy
    cdef double* G
    cdef double* Gi
    cdef double* dx
    cdef double* gu
    cdef int ok
    if kind == 0:
        delta = y - o[1]
        mean = o[1] + delta / n1
        o[0] = n1
        o[1] = mean
        o[2] += delta * (y - mean)
        o[3] += y * y
        return out
    if kind == 2:
        o[0] = n1
        o[1 + <Py_ssize_t>y] += 1.0
        return out
    xbar = o + 6
    gxy = o + 6 + d
    G = o + 6 + 3 * d
    Gi = G + d * d
    f = n / n1
    dx = <double*>malloc(2 * d * sizeof(double))
    gu = dx + d
    dy = y - o[1]
    for a in range(d):
        dx[a] = x[a] - xbar[a]
    for a in range(d):
        for b in range(d):
            G[a * d + b] += f * (dx[a] * dx[b])
        gxy[a] += f * dx[a] * dy
    o[2] += f * dy * dy
    for a in range(d):
        xbar[a] += dx[a] / n1
    o[1] += dy / n1
    o[0] = n1
    ok = 0
    if o[3] > 0.0:
        # rank-one downdate of the stored inverse with u = sqrt(f) dx
        f = sqrt(f)
        den = 1.0
        for a in range(d):
            acc = 0.0
            for b in range(d):
                acc += Gi[a * d + b] * (f * dx[b])
            gu[a] = acc
            den += (f * dx[a]) * acc
        for a in range(d):
            for b in range(d):
                Gi[a * d + b] -= gu[a] * gu[b] / den
        if _norm1(G, d) * _norm1(Gi, d) <= _COND_MAX:
            o[4] += log(den)
            ok = 1
        else:
            ok = _fresh_inverse(G, Gi, d, &o[4])
    elif n1 >= d + 1:
        ok = _fresh_inverse(G, Gi, d, &o[4])
    free(dx)
    _linear_finish(o, d, ok)
    return out


def stats_update(int kind, int d, int C, s, x, y):
    sv = np.ascontiguousarray(s, dtype=np.float64)
    xc = np.ascontiguousarray(x if kind == 1 else np.zeros(1), dtype=np.float64).reshape(-1)
    return _update(kind, d, C, sv, _dptr(xc), float(y))


cdef object _merge(int kind, Py_ssize_t d, Py_ssize_t C, object av, object bv):
    cdef double* a = _dptr(av)
    cdef double* b = _dptr(bv)
    if a[0] == 0:
        return _dcopy(bv)
    if b[0] == 0:
        return _dcopy(av)
    cdef Py_ssize_t size = stats_size(kind, d, C), i, p, q
    out = _dzeros(size)
    cdef double* o = _dptr(out)
    cdef double na = a[0], nb = b[0], n = na + nb, delta, f, dy
    cdef double* dx
    cdef int ok = 0
    if kind == 2:
        for i in range(size):
            o[i] = a[i] + b[i]
        return out
    if kind == 0:
        delta = b[1] - a[1]
        o[0] = n
        o[1] = a[1] + delta * nb / n
        o[2] = a[2] + b[2] + delta * delta * na * nb / n
        o[3] = a[3] + b[3]
        return out
    dx = <double*>malloc(d * sizeof(double))
    f = na * nb / n
    dy = b[1] - a[1]
    for p in range(d):
        dx[p] = b[6 + p] - a[6 + p]
    o[0] = n
    o[1] = a[1] + dy * nb / n
    o[2] = a[2] + b[2] + f * dy * dy
    for p in range(d):
        o[6 + p] = a[6 + p] + dx[p] * nb / n
        o[6 + d + p] = a[6 + d + p] + b[6 + d + p] + f * dx[p] * dy
        for q in range(d):
            i = 6 + 3 * d + p * d + q
            o[i] = (a[i] + b[i]) + f * (dx[p] * dx[q])
    free(dx)
    if n >= d + 1:
        ok = _fresh_inverse(o + 6 + 3 * d, o + 6 + 3 * d + d * d, d, &o[4])
    _linear_finish(o, d, ok)
    return out


def stats_merge(int kind, int d, int C, a, b):
    return _merge(kind, d, C, np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64))


cdef bint _defined(int kind, Py_ssize_t d, const double* s) noexcept nogil:
    if kind == 0:
        return s[0] >= 3 and s[2] > _REL_SS_TOL * s[3]
    if kind == 1:
        return s[0] >= d + 2 and s[3] > 0.0 and s[2] - s[5] > _REL_FIT_TOL * s[2]
    return True


def stats_defined(int kind, int d, int C, s):
    sv = np.ascontiguousarray(s, dtype=np.float64)
    return bool(_defined(kind, d, _dptr(sv)))


cdef double _lml(int kind, Py_ssize_t d, Py_ssize_t C, const double* s) noexcept nogil:
    cdef double n = s[0], half, alpha, acc
    cdef Py_ssize_t c
    if kind == 2:
        alpha = 1.0 / C
        acc = 0.0
        for c in range(C):
            acc += lgamma(s[1 + c] + alpha)
        return acc - C * lgamma(alpha) - lgamma(n + 1.0)
    if not _defined(kind, d, s):
        return _NEG_INF
    if kind == 0:
        half = 0.5 * (n - 1.0)
        return -half * _LOG_2PI - 0.5 * log(n) - half * log(0.5 * s[2]) + lgamma(half)
    half = 0.5 * (n - d - 1.0)
    return -half * _LOG_2PI - 0.5 * s[4] - 0.5 * log(n) - half * log(0.5 * (s[2] - s[5])) + lgamma(half)


def stats_lml(int kind, int d, int C, s):
    sv = np.ascontiguousarray(s, dtype=np.float64)
    return _lml(kind, d, C, _dptr(sv))


cdef inline double _t_logpdf(double y, double a, double b, double c) noexcept nogil:
    cdef double z = (y - a) * (y - a) / (c * b)
    return lgamma(0.5 * (c + 1.0)) - lgamma(0.5 * c) - 0.5 * log(c * M_PI * b) - 0.5 * (c + 1.0) * log1p(z)


def t_logpdf(double y, double a, double b, double c):
    return _t_logpdf(y, a, b, c)


cdef double _log_pred(int kind, Py_ssize_t d, Py_ssize_t C, const double* s, const double* x, double y) noexcept nogil:
    cdef double n = s[0], c, q, acc, mean
    cdef Py_ssize_t a, b
    cdef const double* xbar
    cdef const double* bh
    cdef const double* Gi
    if kind == 2:
        return log((s[1 + <Py_ssize_t>y] + 1.0 / C) / (n + 1.0))
    if not _defined(kind, d, s):
        return _NEG_INF
    if kind == 0:
        c = n - 1.0
        return _t_logpdf(y, s[1], (1.0 + 1.0 / n) * s[2] / c, c)
    xbar = s + 6
    bh = s + 6 + 2 * d
    Gi = s + 6 + 3 * d + d * d
    c = n - d - 1.0
    q = 0.0
    mean = s[1]
    for a in range(d):
        acc = 0.0
        for b in range(d):
            acc += Gi[a * d + b] * (x[b] - xbar[b])
        q += (x[a] - xbar[a]) * acc
        mean += (x[a] - xbar[a]) * bh[a]
    return _t_logpdf(y, mean, (1.0 + 1.0 / n + q) * (s[2] - s[5]) / c, c)


def log_predictive(int kind, int d, int C, s, x, y):
    sv = np.ascontiguousarray(s, dtype=np.float64)
    xc = np.ascontiguousarray(x if kind == 1 else np.zeros(1), dtype=np.float64).reshape(-1)
    return _log_pred(kind, d, C, _dptr(sv), _dptr(xc), float(y))


# ---------------------------------------------------------------------------
# tree nodes


cdef class Node:
    """A tree node (compiled twin of ``_pycore.Node``)."""

    cdef public int depth
    cdef public int dim
    cdef public double value
    cdef public Node left
    cdef public Node right
    cdef public object rows
    cdef public object stats
    cdef public double lml
    cdef public double sub_lp
    cdef public double sub_lml
    cdef public Py_ssize_t n_leaves
    cdef public Py_ssize_t n_nodes
    cdef public object flat

    @property
    def is_leaf(self):
        return self.dim == -1

    def __repr__(self):
        if self.dim == -1:
            return f"Leaf(depth={self.depth}, n={self.rows.shape[0]})"
        return f"Internal(depth={self.depth}, x[{self.dim}] <= {self.value:.6g})"


cdef Node _leaf(int depth, object rows, object stats, double lml, double log_stop):
    cdef Node node = Node.__new__(Node)
    node.depth = depth
    node.dim = -1
    node.value = float("nan")
    node.left = None
    node.right = None
    node.rows = rows
    node.stats = stats
    node.lml = lml
    node.sub_lp = log_stop
    node.sub_lml = lml
    node.n_leaves = 1
    node.n_nodes = 1
    node.flat = None
    return node


cdef Node _internal(int depth, int dim, double value, Node left, Node right, double log_split):
    cdef Node node = Node.__new__(Node)
    node.depth = depth
    node.dim = dim
    node.value = value
    node.left = left
    node.right = right
    node.rows = None
    node.stats = None
    node.lml = float("nan")
    node.sub_lp = log_split + left.sub_lp + right.sub_lp
    node.sub_lml = left.sub_lml + right.sub_lml
    node.n_leaves = left.n_leaves + right.n_leaves
    node.n_nodes = 1 + left.n_nodes + right.n_nodes
    node.flat = None
    return node


def new_leaf(int depth, rows, stats, double lml, double log_stop):
    return _leaf(depth, rows, stats, lml, log_stop)


def new_internal(int depth, int dim, double value, Node left, Node right, double log_split):
    return _internal(depth, dim, value, left, right, log_split)


cdef Node _rebuild(list path, Py_ssize_t stop, Node new_node, const double* log_split):
    """Replace ``path[stop - 1]`` by ``new_node`` and copy the ancestors above it."""
    cdef Node old = <Node>path[stop - 1]
    cdef Node node = new_node
    cdef Node anc
    cdef Py_ssize_t i
    for i in range(stop - 2, -1, -1):
        anc = <Node>path[i]
        if anc.left is old:
            node = _internal(anc.depth, anc.dim, anc.value, node, anc.right, log_split[anc.depth])
        else:
            node = _internal(anc.depth, anc.dim, anc.value, anc.left, node, log_split[anc.depth])
        old = anc
    return node


def rebuild(list path, Node new_node, log_split):
    ls = np.ascontiguousarray(log_split, dtype=np.float64)
    return _rebuild(path, len(path), new_node, _dptr(ls))


cdef list _route_path(Node root, const double* x):
    cdef list path = [root]
    cdef Node node = root
    while node.dim != -1:
        if x[node.dim] <= node.value:
            node = node.left
        else:
            node = node.right
        path.append(node)
    return path


def route_path(Node root, x):
    xc = np.ascontiguousarray(x, dtype=np.float64)
    return _route_path(root, _dptr(xc))


cdef object _subtree_stats(Node node, int kind, Py_ssize_t d, Py_ssize_t C):
    if node.stats is None:
        node.stats = _merge(kind, d, C, _subtree_stats(node.left, kind, d, C), _subtree_stats(node.right, kind, d, C))
    return node.stats


def subtree_stats(Node node, spec):
    kind, d, C, _ = spec
    return _subtree_stats(node, kind, d, C)


cdef void _collect_rows(Node node, list out):
    if node.dim == -1:
        out.append(node.rows)
    else:
        _collect_rows(node.left, out)
        _collect_rows(node.right, out)


def subtree_rows(Node node):
    if node.dim == -1:
        return node.rows
    cdef list parts = []
    _collect_rows(node, parts)
    return np.concatenate(parts)


def group_roots(list particles):
    cdef dict index = {}
    cdef list roots = []
    cdef Py_ssize_t i, n = len(particles)
    labels = _iempty(n)
    cdef cnp.intp_t* lab = _iptr(labels)
    cdef object r, g
    for i in range(n):
        r = particles[i]
        g = index.get(id(r))
        if g is None:
            g = len(roots)
            index[id(r)] = g
            roots.append(r)
        lab[i] = g
    return roots, labels


def weigh(list roots, x, y, spec):
    cdef int kind = spec[0]
    cdef Py_ssize_t d = spec[1], C = spec[2]
    xc = np.ascontiguousarray(x, dtype=np.float64)
    cdef double* xp = _dptr(xc)
    cdef double yv = float(y)
    cdef Py_ssize_t g, n = len(roots)
    cdef list paths = []
    cdef list path
    cdef dict memo = {}
    cdef Node leaf
    lw = _dempty(n)
    cdef double* lwp = _dptr(lw)
    for g in range(n):
        path = _route_path(<Node>roots[g], xp)
        leaf = <Node>path[len(path) - 1]
        v = memo.get(id(leaf))
        if v is None:
            v = _log_pred(kind, d, C, _dptr(leaf.stats), xp, yv)
            memo[id(leaf)] = v
        paths.append(path)
        lwp[g] = v
    return paths, lw


# ---------------------------------------------------------------------------
# propagate


cdef void _merge_sort(cnp.intp_t* idx, cnp.intp_t* tmp, const double* key, Py_ssize_t stride,
                      Py_ssize_t n) noexcept nogil:
    """Stable bottom-up merge sort of ``idx`` by ``key[idx[i] * stride]``."""
    cdef Py_ssize_t width = 1, lo, mid, hi, i, j, k
    cdef cnp.intp_t* src = idx
    cdef cnp.intp_t* dst = tmp
    cdef cnp.intp_t* sw
    while width < n:
        lo = 0
        while lo < n:
            mid = lo + width
            if mid > n:
                mid = n
            hi = lo + 2 * width
            if hi > n:
                hi = n
            i = lo
            j = mid
            k = lo
            while i < mid and j < hi:
                if key[src[j] * stride] < key[src[i] * stride]:
                    dst[k] = src[j]
                    j += 1
                else:
                    dst[k] = src[i]
                    i += 1
                k += 1
            while i < mid:
                dst[k] = src[i]
                i += 1
                k += 1
            while j < hi:
                dst[k] = src[j]
                j += 1
                k += 1
            lo = hi
        sw = src
        src = dst
        dst = sw
        width *= 2
    if src != idx:
        memcpy(idx, src, n * sizeof(cnp.intp_t))


cdef class _DimScan:
    cdef object order, vals, left, right
    cdef cnp.intp_t* po
    cdef double* pv
    cdef double* pl
    cdef double* pr
    cdef Py_ssize_t m


cdef class _Scan:
    cdef object rows
    cdef object Xl
    cdef object yl
    cdef Py_ssize_t m, d, ne
    cdef int depth
    cdef object eligible
    cdef object lo
    cdef object hi
    cdef object orders
    cdef dict dims
    cdef dict children


cdef _Scan _make_scan(Node leaf, Py_ssize_t row, const double* X, const double* Y, Py_ssize_t d,
                      Py_ssize_t min_leaf):
    cdef _Scan sc = _Scan.__new__(_Scan)
    cdef Py_ssize_t n = cnp.PyArray_SIZE(leaf.rows), m = n + 1, i, j, a, r
    sc.depth = leaf.depth
    sc.d = d
    sc.m = m
    sc.rows = _iempty(m)
    cdef cnp.intp_t* pr = _iptr(sc.rows)
    memcpy(pr, _iptr(leaf.rows), n * sizeof(cnp.intp_t))
    pr[n] = row
    sc.Xl = _dempty(m * d)
    sc.yl = _dempty(m)
    cdef double* px = _dptr(sc.Xl)
    cdef double* py = _dptr(sc.yl)
    for i in range(m):
        r = pr[i]
        py[i] = Y[r]
        for a in range(d):
            px[i * d + a] = X[r * d + a]
    sc.eligible = _iempty(d)
    sc.lo = _dempty(d)
    sc.hi = _dempty(d)
    sc.ne = 0
    sc.dims = {}
    sc.children = {}
    sc.orders = None
    if m < 2 * min_leaf:
        return sc
    sc.orders = _iempty(m * d)
    cdef cnp.intp_t* po = _iptr(sc.orders)
    cdef cnp.intp_t* tmp = <cnp.intp_t*>malloc(m * sizeof(cnp.intp_t))
    cdef cnp.intp_t* el = _iptr(sc.eligible)
    cdef double* plo = _dptr(sc.lo)
    cdef double* phi = _dptr(sc.hi)
    cdef double lo, hi
    for j in range(d):
        for i in range(m):
            po[j * m + i] = i
        _merge_sort(po + j * m, tmp, px + j, d, m)
        lo = px[po[j * m + min_leaf - 1] * d + j]
        hi = px[po[j * m + m - min_leaf] * d + j]
        if lo < hi:
            el[sc.ne] = j
            plo[j] = lo
            phi[j] = hi
            sc.ne += 1
    free(tmp)
    return sc


cdef _DimScan _dim_scan(_Scan sc, Py_ssize_t j, int kind, Py_ssize_t C):
    cdef object hit = sc.dims.get(j)
    if hit is not None:
        return <_DimScan>hit
    cdef _DimScan ds = _DimScan.__new__(_DimScan)
    cdef Py_ssize_t m = sc.m, d = sc.d, i, a, p
    ds.m = m
    ds.order = _iempty(m)
    ds.vals = _dempty(m)
    ds.left = _dempty(m + 1)
    ds.right = _dempty(m + 1)
    ds.po = _iptr(ds.order)
    ds.pv = _dptr(ds.vals)
    ds.pl = _dptr(ds.left)
    ds.pr = _dptr(ds.right)
    memcpy(ds.po, _iptr(sc.orders) + j * m, m * sizeof(cnp.intp_t))
    cdef double* px = _dptr(sc.Xl)
    cdef double* py = _dptr(sc.yl)
    cdef double* ys = <double*>malloc(2 * m * sizeof(double))
    cdef double* yr = ys + m
    cdef double* xs = NULL
    cdef double* xr = NULL
    cdef double* tmp = <double*>malloc((m + 1) * sizeof(double))
    for i in range(m):
        p = ds.po[i]
        ds.pv[i] = px[p * d + j]
        ys[i] = py[p]
        yr[m - 1 - i] = py[p]
    if kind == 1:
        xs = <double*>malloc(2 * m * d * sizeof(double))
        xr = xs + m * d
        for i in range(m):
            p = ds.po[i]
            for a in range(d):
                xs[i * d + a] = px[p * d + a]
                xr[(m - 1 - i) * d + a] = px[p * d + a]
        _scan_linear(xs, ys, m, d, ds.pl)
        _scan_linear(xr, yr, m, d, tmp)
        free(xs)
    elif kind == 0:
        _scan_constant(ys, m, ds.pl)
        _scan_constant(yr, m, tmp)
    else:
        _scan_multinomial(ys, m, C, ds.pl)
        _scan_multinomial(yr, m, C, tmp)
    for i in range(m + 1):
        ds.pr[i] = tmp[m - i]
    free(tmp)
    free(ys)
    sc.dims[j] = ds
    return ds


cdef tuple _child_pair(_Scan sc, _DimScan ds, Py_ssize_t j, Py_ssize_t key, int kind, Py_ssize_t d,
                       Py_ssize_t C, const double* X, const double* Y, const double* log_stop):
    k = (j, key)
    hit = sc.children.get(k)
    if hit is not None:
        return <tuple>hit
    cdef Py_ssize_t m = sc.m, i
    cdef cnp.intp_t* rows = _iptr(sc.rows)
    lrows = _iempty(key)
    rrows = _iempty(m - key)
    cdef cnp.intp_t* pl = _iptr(lrows)
    cdef cnp.intp_t* pr = _iptr(rrows)
    for i in range(key):
        pl[i] = rows[ds.po[i]]
    for i in range(key, m):
        pr[i - key] = rows[ds.po[i]]
    cdef int dep = sc.depth + 1
    ls = _batch(kind, d, C, X, Y, pl, key)
    rs = _batch(kind, d, C, X, Y, pr, m - key)
    out = (
        _leaf(dep, lrows, ls, _lml(kind, d, C, _dptr(ls)), log_stop[dep]),
        _leaf(dep, rrows, rs, _lml(kind, d, C, _dptr(rs)), log_stop[dep]),
    )
    sc.children[k] = out
    return out


cdef inline Py_ssize_t _bisect_right(const double* v, Py_ssize_t n, double s) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) // 2
        if s < v[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


def propagate(list paths, labels, u, Py_ssize_t row, X, Y, binary, spec, log_split, log_stop, bint moves):
    """Compiled twin of ``_pycore.propagate``."""
    cdef int kind = spec[0]
    cdef Py_ssize_t d = spec[1], C = spec[2], min_leaf = spec[3]
    Xc = np.ascontiguousarray(X, dtype=np.float64)
    Yc = np.ascontiguousarray(Y, dtype=np.float64)
    uc = np.ascontiguousarray(u, dtype=np.float64)
    lab = np.ascontiguousarray(labels, dtype=np.intp)
    bin8 = np.ascontiguousarray(binary, dtype=np.uint8)
    lsp = np.ascontiguousarray(log_split, dtype=np.float64)
    lst = np.ascontiguousarray(log_stop, dtype=np.float64)
    cdef double* px = _dptr(Xc)
    cdef double* py = _dptr(Yc)
    cdef double* pu = _dptr(uc)
    cdef cnp.intp_t* plab = _iptr(lab)
    cdef unsigned char* pbin = <unsigned char*>cnp.PyArray_DATA(bin8)
    cdef double* log_sp = _dptr(lsp)
    cdef double* log_st = _dptr(lst)
    cdef Py_ssize_t n = cnp.PyArray_SIZE(lab), n_depth = cnp.PyArray_SIZE(lsp)
    cdef double* x = px + row * d
    cdef double y = py[row]
    cdef double* u1 = pu + n
    cdef double* u2 = pu + 2 * n
    cdef double* u3 = pu + 3 * n

    cdef list out = [None] * n
    cdef dict stay_cache = {}
    cdef dict prune_cache = {}
    cdef dict scan_cache = {}

    order = np.argsort(lab, kind="stable")
    cdef cnp.intp_t* pord = _iptr(order)
    cdef Py_ssize_t start = 0, stop, t, i, g, dep, plen, ne, pick, j = 0, key = 0
    cdef list path
    cdef Node leaf, parent, sib, stay, node, stay_root, prune_root, lchild, rchild
    cdef _Scan scan
    cdef _DimScan ds
    cdef list ph
    cdef double common, s_prune, s_stay, s_grow, base, top, c0, c1, c2, v, lo, hi, sv = 0.0
    cdef int choice
    cdef tuple pair

    while start < n:
        g = plab[pord[start]]
        stop = start + 1
        while stop < n and plab[pord[stop]] == g:
            stop += 1
        path = <list>paths[g]
        plen = len(path)
        leaf = <Node>path[plen - 1]
        dep = leaf.depth
        if dep + 2 > n_depth:
            raise ValueError("tree deeper than the prior table")
        hit = stay_cache.get(id(leaf))
        if hit is None:
            s = _update(kind, d, C, leaf.stats, x, y)
            rows = _iempty(cnp.PyArray_SIZE(leaf.rows) + 1)
            memcpy(_iptr(rows), _iptr(leaf.rows), cnp.PyArray_SIZE(leaf.rows) * sizeof(cnp.intp_t))
            _iptr(rows)[cnp.PyArray_SIZE(leaf.rows)] = row
            stay = _leaf(dep, rows, s, _lml(kind, d, C, _dptr(s)), log_st[dep])
            stay_cache[id(leaf)] = (leaf, stay)
        else:
            stay = <Node>(<tuple>hit)[1]
        if not moves:
            stay_root = _rebuild(path, plen, stay, log_sp)
            for t in range(start, stop):
                out[pord[t]] = stay_root
            start = stop
            continue

        parent = None
        if plen > 1:
            parent = <Node>path[plen - 2]
            sib = parent.right if parent.left is leaf else parent.left
            common = log_sp[parent.depth] + sib.sub_lp + sib.sub_lml
            hit = prune_cache.get(id(parent))
            if hit is None:
                s = _update(kind, d, C, _subtree_stats(parent, kind, d, C), x, y)
                ph = [parent, s, _lml(kind, d, C, _dptr(s)), None]
                prune_cache[id(parent)] = ph
            else:
                ph = <list>hit
            s_prune = log_st[parent.depth] + <double>ph[2]
        else:
            common = 0.0
            s_prune = _NEG_INF
        s_stay = common + log_st[dep] + stay.lml

        hit = scan_cache.get(id(leaf))
        if hit is None:
            scan = _make_scan(leaf, row, px, py, d, min_leaf)
            scan_cache[id(leaf)] = (leaf, scan)
        else:
            scan = <_Scan>(<tuple>hit)[1]
        ne = scan.ne
        base = common + log_sp[dep] + 2.0 * log_st[dep + 1]

        stay_root = None
        prune_root = None
        for t in range(start, stop):
            i = pord[t]
            s_grow = _NEG_INF
            ds = None
            if ne:
                pick = <Py_ssize_t>(u1[i] * ne)
                if pick >= ne:
                    pick = ne - 1
                j = _iptr(scan.eligible)[pick]
                lo = _dptr(scan.lo)[j]
                hi = _dptr(scan.hi)[j]
                if pbin[j]:
                    sv = 0.5 * (lo + hi)
                else:
                    sv = lo + u2[i] * (hi - lo)
                    if sv >= hi:
                        sv = nextafter(hi, _NEG_INF)
                ds = _dim_scan(scan, j, kind, C)
                key = _bisect_right(ds.pv, ds.m, sv)
                s_grow = base + ds.pl[key] + ds.pr[key]
            top = s_stay
            if s_prune > top:
                top = s_prune
            if s_grow > top:
                top = s_grow
            if top == _NEG_INF:
                choice = 0
            else:
                c0 = exp(s_stay - top)
                c1 = c0 + exp(s_prune - top)
                c2 = c1 + exp(s_grow - top)
                v = u3[i] * c2
                choice = 0 if v < c0 else (1 if v < c1 else 2)
            if choice == 0:
                if stay_root is None:
                    stay_root = _rebuild(path, plen, stay, log_sp)
                out[i] = stay_root
            elif choice == 1:
                if prune_root is None:
                    if ph[3] is None:
                        prows = np.append(subtree_rows(parent), row)
                        ph[3] = _leaf(parent.depth, prows, ph[1], <double>ph[2], log_st[parent.depth])
                    prune_root = _rebuild(path, plen - 1, <Node>ph[3], log_sp)
                out[i] = prune_root
            else:
                pair = _child_pair(scan, ds, j, key, kind, d, C, px, py, log_st)
                node = _internal(dep, j, sv, <Node>pair[0], <Node>pair[1], log_sp[dep])
                out[i] = _rebuild(path, plen, node, log_sp)
        start = stop
    return out
