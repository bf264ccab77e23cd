"""Pure numpy implementation of the pairwise kernels in ``_core.pyx``.

Pairs (i, j) with j < i and 0 < t_i - t_j <= max_lag are generated in
bounded-size blocks and evaluated vectorised.
"""
from __future__ import annotations

import numpy as np

_BLOCK = 1 << 21


def g_pairs(kind, par, te, re, vals, dt, r2, max_lag=np.inf):
    """Triggering value for arrays of lags and squared distances."""
    dt = np.asarray(dt, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    live = (dt > 0) & (dt <= max_lag)
    out = np.zeros(np.broadcast(dt, r2).shape)
    if kind == 0:
        theta, omega, sigma2 = par[:3]
        norm = theta / (2.0 * np.pi * omega * sigma2)
        with np.errstate(over="ignore"):
            val = norm * np.exp(-dt / omega - 0.5 * r2 / sigma2)
    elif kind == 1:
        k0, c, p, d, q = par[:5]
        snorm = (q - 1.0) / (np.pi * d)
        with np.errstate(over="ignore", invalid="ignore"):
            val = k0 * np.power(np.maximum(dt, 0) + c, -p) * snorm * np.power(1.0 + r2 / d, -q)
    else:
        te = np.asarray(te)
        re = np.asarray(re)
        nb = re.size - 1
        a = np.searchsorted(te, dt, side="right") - 1
        r = np.sqrt(r2)
        b = np.searchsorted(re, r, side="right") - 1
        inb = (a >= 0) & (a < te.size - 1) & (b >= 0) & (b < nb)
        val = np.zeros(out.shape)
        val[inb] = np.asarray(vals)[a[inb] * nb + b[inb]]
    out[live] = np.broadcast_to(val, out.shape)[live]
    return out


def _eff_lag(kind, te, max_lag):
    if kind == 2:
        return min(max_lag, float(te[-1]))
    return max_lag


def _iter_pairs(t, lag, qt=None):
    """Yield (i, j) index blocks; i indexes queries (events if qt is None)."""
    t = np.asarray(t)
    if qt is None:
        qt = t
        hi = np.arange(t.size)
    else:
        hi = np.searchsorted(t, qt, side="left")
    lo = np.searchsorted(t, qt - lag, side="left") if np.isfinite(lag) else np.zeros(qt.size, dtype=np.intp)
    lo = np.minimum(lo, hi)
    counts = hi - lo
    start = 0
    m = qt.size
    while start < m:
        csum = np.cumsum(counts[start:])
        stop = start + int(np.searchsorted(csum, _BLOCK, side="right"))
        stop = max(stop, start + 1)
        stop = min(stop, m)
        c = counts[start:stop]
        total = int(c.sum())
        if total:
            ii = np.repeat(np.arange(start, stop), c)
            offs = np.arange(total) - np.repeat(np.cumsum(c) - c, c)
            jj = lo[ii] + offs
            yield ii, jj
        start = stop


def event_sums(kind, par, te, re, vals, t, x, y, kmul, max_lag):
    lag = _eff_lag(kind, te, max_lag)
    out = np.zeros(len(t))
    for ii, jj in _iter_pairs(t, lag):
        dt = t[ii] - t[jj]
        r2 = (x[ii] - x[jj]) ** 2 + (y[ii] - y[jj]) ** 2
        g = kmul[jj] * g_pairs(kind, par, te, re, vals, dt, r2, lag)
        out += np.bincount(ii, weights=g, minlength=len(t))
    return out


def point_sums(kind, par, te, re, vals, t, x, y, kmul, max_lag, qt, qx, qy):
    lag = _eff_lag(kind, te, max_lag)
    qt = np.asarray(qt, dtype=float)
    out = np.zeros(qt.size)
    for ii, jj in _iter_pairs(t, lag, qt):
        dt = qt[ii] - t[jj]
        r2 = (qx[ii] - x[jj]) ** 2 + (qy[ii] - y[jj]) ** 2
        g = kmul[jj] * g_pairs(kind, par, te, re, vals, dt, r2, lag)
        out += np.bincount(ii, weights=g, minlength=qt.size)
    return out


def pair_probs(kind, par, te, re, vals, t, x, y, kmul, max_lag, lam, threshold):
    lag = _eff_lag(kind, te, max_lag)
    parts_i, parts_j, parts_p = [], [], []
    for ii, jj in _iter_pairs(t, lag):
        dt = t[ii] - t[jj]
        r2 = (x[ii] - x[jj]) ** 2 + (y[ii] - y[jj]) ** 2
        g = kmul[jj] * g_pairs(kind, par, te, re, vals, dt, r2, lag)
        p = g / lam[ii]
        keep = (g > 0) & (p > threshold)
        parts_i.append(ii[keep])
        parts_j.append(jj[keep])
        parts_p.append(p[keep])
    if not parts_i:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0)
    return (np.concatenate(parts_i).astype(np.int64),
            np.concatenate(parts_j).astype(np.int64), np.concatenate(parts_p))


def gexp_moments(par, t, x, y, kmul, max_lag):
    n = len(t)
    out = np.zeros((3, n))
    for ii, jj in _iter_pairs(t, max_lag):
        dt = t[ii] - t[jj]
        r2 = (x[ii] - x[jj]) ** 2 + (y[ii] - y[jj]) ** 2
        g = kmul[jj] * g_pairs(0, par, None, None, None, dt, r2, max_lag)
        out[0] += np.bincount(ii, weights=g, minlength=n)
        out[1] += np.bincount(ii, weights=g * dt, minlength=n)
        out[2] += np.bincount(ii, weights=g * r2, minlength=n)
    return out


def hist_cells(te, re, vals, t, x, y, kmul, max_lag, wt):
    te = np.asarray(te)
    re = np.asarray(re)
    na, nb = te.size - 1, re.size - 1
    lag = min(max_lag, float(te[-1]))
    out = np.zeros(na * nb)
    for ii, jj in _iter_pairs(t, lag):
        dt = t[ii] - t[jj]
        r = np.sqrt((x[ii] - x[jj]) ** 2 + (y[ii] - y[jj]) ** 2)
        a = np.searchsorted(te, dt, side="right") - 1
        b = np.searchsorted(re, r, side="right") - 1
        ok = (dt > 0) & (dt <= lag) & (a >= 0) & (a < na) & (b >= 0) & (b < nb)
        cell = a[ok] * nb + b[ok]
        w = wt[ii[ok]] * kmul[jj[ok]] * np.asarray(vals)[cell]
        out += np.bincount(cell, weights=w, minlength=na * nb)
    return out


def collect_pairs(t, x, y, max_lag):
    parts = []
    for ii, jj in _iter_pairs(t, max_lag):
        dt = t[ii] - t[jj]
        keep = dt > 0
        ii, jj, dt = ii[keep], jj[keep], dt[keep]
        r2 = (x[ii] - x[jj]) ** 2 + (y[ii] - y[jj]) ** 2
        parts.append((ii.astype(np.int64), jj.astype(np.int64), dt, r2))
    if not parts:
        e = np.empty(0)
        return np.empty(0, np.int64), np.empty(0, np.int64), e, e.copy()
    return tuple(np.concatenate(p) for p in zip(*parts))


def prefix_kde(x, y, w, h):
    n = len(x)
    out = np.zeros(n)
    inv = 0.5 / (h * h)
    t = np.arange(n, dtype=float)
    # index order stands in for time: j < i
    for ii, jj in _iter_pairs(t, np.inf):
        r2 = (x[ii] - x[jj]) ** 2 + (y[ii] - y[jj]) ** 2
        out += np.bincount(ii, weights=w[jj] * np.exp(-r2 * inv), minlength=n)
    return out
