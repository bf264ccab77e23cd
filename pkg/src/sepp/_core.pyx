# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pairwise kernels over time-sorted event arrays.

Kernel kinds: 0 Gaussian-exponential (theta, omega, sigma2),
1 ETAS power law (K0, c, p, d, q), 2 histogram (time edges, radius edges,
row-major cell values).  ``kmul`` scales each parent's contribution.
The function set and signatures mirror ``sepp._pycore``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, pow, sqrt, log, M_PI, INFINITY

cnp.import_array()

ctypedef cnp.float64_t f8


cdef inline Py_ssize_t _bin(const f8[:] edges, double v) noexcept nogil:
    # index a with edges[a] <= v < edges[a+1], or -1
    cdef Py_ssize_t lo = 0, hi = edges.shape[0] - 1, mid
    if v < edges[0] or v >= edges[hi]:
        return -1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if edges[mid] <= v:
            lo = mid
        else:
            hi = mid
    return lo


cdef struct KParams:
    int kind
    double a0, a1, a2, a3, a4
    double gnorm, snorm
    double lag


cdef KParams _prep(int kind, const f8[:] par, const f8[:] te, double max_lag):
    cdef KParams kp
    kp.kind = kind
    kp.a0 = par[0] if par.shape[0] > 0 else 0
    kp.a1 = par[1] if par.shape[0] > 1 else 0
    kp.a2 = par[2] if par.shape[0] > 2 else 0
    kp.a3 = par[3] if par.shape[0] > 3 else 0
    kp.a4 = par[4] if par.shape[0] > 4 else 0
    kp.lag = max_lag
    if kind == 0:
        kp.gnorm = kp.a0 / (2.0 * M_PI * kp.a1 * kp.a2)
    elif kind == 1:
        kp.gnorm = kp.a0
        kp.snorm = (kp.a4 - 1.0) / (M_PI * kp.a3)
    else:
        kp.gnorm = 1.0
        if te[te.shape[0] - 1] < kp.lag:
            kp.lag = te[te.shape[0] - 1]
    return kp


cdef inline double _g(KParams* kp, const f8[:] te, const f8[:] re, const f8[:] vals,
                      double dt, double r2) noexcept nogil:
    cdef Py_ssize_t a, b, nb
    if dt <= 0.0 or dt > kp.lag:
        return 0.0
    if kp.kind == 0:
        return kp.gnorm * exp(-dt / kp.a1 - 0.5 * r2 / kp.a2)
    elif kp.kind == 1:
        return kp.gnorm * pow(dt + kp.a1, -kp.a2) * kp.snorm * pow(1.0 + r2 / kp.a3, -kp.a4)
    else:
        a = _bin(te, dt)
        if a < 0:
            return 0.0
        b = _bin(re, sqrt(r2))
        if b < 0:
            return 0.0
        nb = re.shape[0] - 1
        return vals[a * nb + b]


def event_sums(int kind, const f8[:] par, const f8[:] te, const f8[:] re, const f8[:] vals,
               const f8[:] t, const f8[:] x, const f8[:] y, const f8[:] kmul, double max_lag):
    cdef Py_ssize_t n = t.shape[0], i, j
    cdef KParams kp = _prep(kind, par, te, max_lag)
    cdef cnp.ndarray[f8, ndim=1] out = np.zeros(n)
    cdef f8[:] o = out
    cdef double dt, dx, dy, acc
    with nogil:
        for i in range(n):
            acc = 0.0
            j = i - 1
            while j >= 0:
                dt = t[i] - t[j]
                if dt > kp.lag:
                    break
                dx = x[i] - x[j]
                dy = y[i] - y[j]
                acc += kmul[j] * _g(&kp, te, re, vals, dt, dx * dx + dy * dy)
                j -= 1
            o[i] = acc
    return out


def point_sums(int kind, const f8[:] par, const f8[:] te, const f8[:] re, const f8[:] vals,
               const f8[:] t, const f8[:] x, const f8[:] y, const f8[:] kmul, double max_lag,
               const f8[:] qt, const f8[:] qx, const f8[:] qy):
    cdef Py_ssize_t m = qt.shape[0], k, j
    cdef KParams kp = _prep(kind, par, te, max_lag)
    cdef cnp.ndarray[cnp.intp_t, ndim=1] hi = np.searchsorted(np.asarray(t), np.asarray(qt), side="left")
    cdef cnp.intp_t[:] hv = hi
    cdef cnp.ndarray[f8, ndim=1] out = np.zeros(m)
    cdef f8[:] o = out
    cdef double dt, dx, dy, acc
    with nogil:
        for k in range(m):
            acc = 0.0
            j = hv[k] - 1
            while j >= 0:
                dt = qt[k] - t[j]
                if dt > kp.lag:
                    break
                dx = qx[k] - x[j]
                dy = qy[k] - y[j]
                acc += kmul[j] * _g(&kp, te, re, vals, dt, dx * dx + dy * dy)
                j -= 1
            o[k] = acc
    return out


def pair_probs(int kind, const f8[:] par, const f8[:] te, const f8[:] re, const f8[:] vals,
               const f8[:] t, const f8[:] x, const f8[:] y, const f8[:] kmul, double max_lag,
               const f8[:] lam, double threshold):
    cdef Py_ssize_t n = t.shape[0], i, j, cnt = 0, pos = 0
    cdef KParams kp = _prep(kind, par, te, max_lag)
    cdef double dt, dx, dy, g
    with nogil:
        for i in range(n):
            j = i - 1
            while j >= 0:
                dt = t[i] - t[j]
                if dt > kp.lag:
                    break
                dx = x[i] - x[j]
                dy = y[i] - y[j]
                g = kmul[j] * _g(&kp, te, re, vals, dt, dx * dx + dy * dy)
                if g > 0.0 and g / lam[i] > threshold:
                    cnt += 1
                j -= 1
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ii = np.empty(cnt, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] jj = np.empty(cnt, dtype=np.int64)
    cdef cnp.ndarray[f8, ndim=1] pp = np.empty(cnt)
    cdef cnp.int64_t[:] iv = ii
    cdef cnp.int64_t[:] jv = jj
    cdef f8[:] pv = pp
    with nogil:
        for i in range(n):
            j = i - 1
            while j >= 0:
                dt = t[i] - t[j]
                if dt > kp.lag:
                    break
                dx = x[i] - x[j]
                dy = y[i] - y[j]
                g = kmul[j] * _g(&kp, te, re, vals, dt, dx * dx + dy * dy)
                if g > 0.0 and g / lam[i] > threshold:
                    iv[pos] = i
                    jv[pos] = j
                    pv[pos] = g / lam[i]
                    pos += 1
                j -= 1
    # rows were filled newest-parent first; present ascending j within i
    order = np.lexsort((jj, ii))
    return ii[order], jj[order], pp[order]


def gexp_moments(const f8[:] par, const f8[:] t, const f8[:] x, const f8[:] y,
                 const f8[:] kmul, double max_lag):
    cdef Py_ssize_t n = t.shape[0], i, j
    cdef KParams kp = _prep(0, par, par, max_lag)
    cdef cnp.ndarray[f8, ndim=2] out = np.zeros((3, n))
    cdef f8[:, :] o = out
    cdef double dt, dx, dy, r2, g, s0, s1, s2
    with nogil:
        for i in range(n):
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            j = i - 1
            while j >= 0:
                dt = t[i] - t[j]
                if dt > kp.lag:
                    break
                if dt > 0.0:
                    dx = x[i] - x[j]
                    dy = y[i] - y[j]
                    r2 = dx * dx + dy * dy
                    g = kmul[j] * kp.gnorm * exp(-dt / kp.a1 - 0.5 * r2 / kp.a2)
                    s0 += g
                    s1 += g * dt
                    s2 += g * r2
                j -= 1
            o[0, i] = s0
            o[1, i] = s1
            o[2, i] = s2
    return out


def hist_cells(const f8[:] te, const f8[:] re, const f8[:] vals,
               const f8[:] t, const f8[:] x, const f8[:] y, const f8[:] kmul,
               double max_lag, const f8[:] wt):
    cdef Py_ssize_t n = t.shape[0], i, j, a, b
    cdef Py_ssize_t na = te.shape[0] - 1, nb = re.shape[0] - 1
    cdef double lag = max_lag
    if te[na] < lag:
        lag = te[na]
    cdef cnp.ndarray[f8, ndim=1] out = np.zeros(na * nb)
    cdef f8[:] o = out
    cdef double dt, dx, dy
    with nogil:
        for i in range(n):
            j = i - 1
            while j >= 0:
                dt = t[i] - t[j]
                if dt > lag:
                    break
                if dt > 0.0:
                    a = _bin(te, dt)
                    if a >= 0:
                        dx = x[i] - x[j]
                        dy = y[i] - y[j]
                        b = _bin(re, sqrt(dx * dx + dy * dy))
                        if b >= 0:
                            o[a * nb + b] += wt[i] * kmul[j] * vals[a * nb + b]
                j -= 1
    return out


def collect_pairs(const f8[:] t, const f8[:] x, const f8[:] y, double max_lag):
    cdef Py_ssize_t n = t.shape[0], i, j, cnt = 0, pos = 0
    cdef double dt, dx, dy
    with nogil:
        for i in range(n):
            j = i - 1
            while j >= 0:
                dt = t[i] - t[j]
                if dt > max_lag:
                    break
                if dt > 0.0:
                    cnt += 1
                j -= 1
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ii = np.empty(cnt, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] jj = np.empty(cnt, dtype=np.int64)
    cdef cnp.ndarray[f8, ndim=1] dd = np.empty(cnt)
    cdef cnp.ndarray[f8, ndim=1] rr = np.empty(cnt)
    cdef cnp.int64_t[:] iv = ii
    cdef cnp.int64_t[:] jv = jj
    cdef f8[:] dv = dd
    cdef f8[:] rv = rr
    with nogil:
        for i in range(n):
            j = i - 1
            while j >= 0:
                dt = t[i] - t[j]
                if dt > max_lag:
                    break
                if dt > 0.0:
                    dx = x[i] - x[j]
                    dy = y[i] - y[j]
                    iv[pos] = i
                    jv[pos] = j
                    dv[pos] = dt
                    rv[pos] = dx * dx + dy * dy
                    pos += 1
                j -= 1
    order = np.lexsort((jj, ii))
    return ii[order], jj[order], dd[order], rr[order]


def prefix_kde(const f8[:] x, const f8[:] y, const f8[:] w, double h):
    cdef Py_ssize_t n = x.shape[0], i, j
    cdef cnp.ndarray[f8, ndim=1] out = np.zeros(n)
    cdef f8[:] o = out
    cdef double inv = 0.5 / (h * h), acc, dx, dy
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(i):
                dx = x[i] - x[j]
                dy = y[i] - y[j]
                acc += w[j] * exp(-(dx * dx + dy * dy) * inv)
            o[i] = acc
    return out
