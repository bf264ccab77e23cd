"""Background and triggering families and the conditional intensity.

The conditional intensity is

    lambda(s, t) = mu(s) + sum_{i: t_i < t} g(s - s_i, t - t_i)

with g = 0 for non-positive lags.  Triggering families are isotropic in
space.  ``IntensityModel.max_lag`` optionally truncates g at a lag L; the
truncation is part of the model (masses, integrals and simulation all
honour it), so likelihoods stay exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import erf

from ._backend import core
from ._radial import radial_mass_in_polygon
from .catalog import EventCatalog, ObservationDomain, Rectangle

TAIL_EPS = 1e-13


class ParameterError(ValueError):
    """Invalid model parameters (non-positive scales, infinite mass)."""


class QuadratureError(RuntimeError):
    """Cubature could not reach the requested tolerance."""


def _positive(name, value):
    if not (math.isfinite(value) and value > 0):
        raise ParameterError(f"{name} must be positive and finite, got {value}")


def _gauss_rect_mass(cx, cy, sd, rect: Rectangle) -> np.ndarray:
    """Mass of isotropic Gaussians (std ``sd``) inside an axis-aligned rectangle."""
    k = 1.0 / (np.sqrt(2.0) * sd)
    fx = 0.5 * (erf((rect.x_max - cx) * k) - erf((rect.x_min - cx) * k))
    fy = 0.5 * (erf((rect.y_max - cy) * k) - erf((rect.y_min - cy) * k))
    return fx * fy


def _interval_overlap(lo, hi, a, b):
    return np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0.0, None)


# --------------------------------------------------------------------------
# Triggering families
# --------------------------------------------------------------------------


class _Separable:
    """Shared machinery for g(r, u) = mass * h(u) * f(r), h and f normalised."""

    kind: int

    def kmul(self, marks, n: int) -> np.ndarray:
        return np.ones(n)

    def base_mass(self) -> float:
        raise NotImplementedError

    def temporal_cdf(self, u):
        raise NotImplementedError

    def temporal_density(self, u):
        raise NotImplementedError

    def radial_cdf(self, r):
        raise NotImplementedError

    def tail_radius(self, eps: float = TAIL_EPS) -> float:
        raise NotImplementedError

    def mass(self, mark=None, max_lag: float = np.inf) -> float:
        km = self.kmul(None if mark is None else np.atleast_1d(mark), 1)[0]
        return float(self.base_mass() * km * self.temporal_cdf(max_lag))

    def value(self, dx, dy, dt, mark=None, max_lag: float = np.inf):
        kind, par, te, re, vals = self.kernel_args()
        r2 = np.asarray(dx, float) ** 2 + np.asarray(dy, float) ** 2
        km = self.kmul(None if mark is None else np.atleast_1d(mark), 1)[0]
        return km * core_g(kind, par, te, re, vals, dt, r2, max_lag)

    def spatial_mass(self, cx, cy, region, panels: int = 16) -> np.ndarray:
        cx = np.atleast_1d(np.asarray(cx, float))
        cy = np.atleast_1d(np.asarray(cy, float))
        if region is None:
            return np.ones(cx.size)
        return radial_mass_in_polygon(cx, cy, region.vertices, self.radial_cdf,
                                      tail_radius=self.tail_radius(), panels=panels)

    def window_mass(self, cx, cy, marks, lag_lo, lag_hi, region=None,
                    max_lag: float = np.inf, panels: int = 16) -> np.ndarray:
        """Per-parent integral of g over ``region`` x (lag_lo, lag_hi]."""
        cx = np.atleast_1d(np.asarray(cx, float))
        lo = np.minimum(np.asarray(lag_lo, float), max_lag)
        hi = np.minimum(np.asarray(lag_hi, float), max_lag)
        tpart = np.clip(self.temporal_cdf(hi) - self.temporal_cdf(lo), 0.0, None)
        km = self.kmul(marks, cx.size)
        return self.base_mass() * km * tpart * self.spatial_mass(cx, cy, region, panels)

    def time_rate(self, lag, max_lag=np.inf):
        """Full-plane rate at ``lag`` per unit parent multiplier."""
        lag = np.asarray(lag, float)
        live = (lag > 0) & (lag <= max_lag)
        return np.where(live, self.base_mass() * self.temporal_density(np.where(live, lag, 1.0)), 0.0)

    def time_rate_sup(self, lag, max_lag=np.inf):
        # temporal densities here are non-increasing
        lag = np.asarray(lag, float)
        return np.where(lag <= max_lag,
                        self.base_mass() * self.temporal_density(np.maximum(lag, 0.0)), 0.0)

    def sample_offsets(self, rng, n: int, max_lag: float = np.inf):
        dt = self.sample_lags(rng, n, max_lag)
        dx, dy = self.sample_displacements(rng, n)
        return dt, dx, dy

    def sample_displacements(self, rng, n, lags=None):
        raise NotImplementedError

    def temporal_ppf(self, u):
        raise NotImplementedError

    def sample_lags(self, rng, n, max_lag: float = np.inf):
        # inverse CDF, restricted to (0, max_lag]
        top = float(self.temporal_cdf(max_lag))
        return self.temporal_ppf(top * (1.0 - rng.random(n)))


@dataclass(frozen=True)
class GaussianExponential(_Separable):
    """g = theta / (2 pi omega sigma2) exp(-t / omega) exp(-|s|^2 / (2 sigma2))."""

    theta: float
    omega: float
    sigma2: float
    kind = 0
    param_names = ("theta", "omega", "sigma2")

    def __post_init__(self):
        if not (math.isfinite(self.theta) and self.theta >= 0):
            raise ParameterError(f"theta must be >= 0, got {self.theta}")
        _positive("omega", self.omega)
        _positive("sigma2", self.sigma2)

    def kernel_args(self):
        par = np.array([self.theta, self.omega, self.sigma2])
        return 0, par, _EMPTY, _EMPTY, _EMPTY

    def params(self) -> np.ndarray:
        return np.array([self.theta, self.omega, self.sigma2])

    def with_params(self, vec) -> "GaussianExponential":
        return GaussianExponential(*map(float, vec))

    def base_mass(self) -> float:
        return self.theta

    def temporal_cdf(self, u):
        u = np.asarray(u, float)
        return -np.expm1(-np.maximum(u, 0.0) / self.omega)

    def temporal_density(self, u):
        return np.exp(-np.asarray(u, float) / self.omega) / self.omega

    def radial_cdf(self, r):
        return -np.expm1(-np.asarray(r, float) ** 2 / (2.0 * self.sigma2))

    def tail_radius(self, eps: float = TAIL_EPS) -> float:
        return math.sqrt(2.0 * self.sigma2 * math.log(1.0 / eps))

    def spatial_mass(self, cx, cy, region, panels: int = 16) -> np.ndarray:
        if isinstance(region, Rectangle):
            return _gauss_rect_mass(np.atleast_1d(np.asarray(cx, float)),
                                    np.atleast_1d(np.asarray(cy, float)),
                                    math.sqrt(self.sigma2), region)
        return super().spatial_mass(cx, cy, region, panels)

    def temporal_ppf(self, u):
        return -self.omega * np.log1p(-np.asarray(u, float))

    def sample_displacements(self, rng, n, lags=None):
        sd = math.sqrt(self.sigma2)
        return rng.normal(0.0, sd, n), rng.normal(0.0, sd, n)

    def default_pads(self) -> tuple[float, float]:
        return 5.0 * self.omega, 5.0 * math.sqrt(self.sigma2)


@dataclass(frozen=True)
class EtasPowerLaw(_Separable):
    """Modified-Omori time decay with a normalised planar power-law kernel.

    g = K_i (t + c)^(-p) * (q - 1) / (pi d) * (1 + |s|^2 / d)^(-q), with
    K_i = K0 exp(alpha (M_i - M0)).  The temporal integral of a parent is
    K_i c^(1-p) / (p - 1) and the spatial kernel integrates to one.
    Unmarked parents (mark None or NaN) are treated as M_i = M0.
    """

    K0: float
    alpha: float
    c: float
    p: float
    d: float
    q: float
    M0: float = 0.0
    kind = 1
    param_names = ("K0", "alpha", "c", "p", "d", "q")

    def __post_init__(self):
        if not (math.isfinite(self.K0) and self.K0 >= 0):
            raise ParameterError(f"K0 must be >= 0, got {self.K0}")
        if not math.isfinite(self.alpha):
            raise ParameterError("alpha must be finite")
        _positive("c", self.c)
        _positive("d", self.d)
        if not (math.isfinite(self.p) and self.p > 1):
            raise ParameterError(f"p must exceed 1 for a finite offspring mass (non-integrable), got {self.p}")
        if not (math.isfinite(self.q) and self.q > 1):
            raise ParameterError(f"q must exceed 1 for a normalisable spatial kernel, got {self.q}")

    def kernel_args(self):
        par = np.array([self.K0, self.c, self.p, self.d, self.q])
        return 1, par, _EMPTY, _EMPTY, _EMPTY

    def params(self) -> np.ndarray:
        return np.array([self.K0, self.alpha, self.c, self.p, self.d, self.q])

    def with_params(self, vec) -> "EtasPowerLaw":
        return EtasPowerLaw(*map(float, vec), M0=self.M0)

    def kmul(self, marks, n: int) -> np.ndarray:
        if marks is None:
            return np.ones(n)
        m = np.asarray(marks, float)
        m = np.where(np.isnan(m), self.M0, m)
        return np.exp(self.alpha * (m - self.M0))

    def base_mass(self) -> float:
        return self.K0 * self.c ** (1.0 - self.p) / (self.p - 1.0)

    def temporal_cdf(self, u):
        u = np.maximum(np.asarray(u, float), 0.0)
        with np.errstate(divide="ignore"):
            return -np.expm1((self.p - 1.0) * (np.log(self.c) - np.log(u + self.c)))

    def temporal_density(self, u):
        u = np.asarray(u, float)
        return (self.p - 1.0) / self.c * np.power(1.0 + u / self.c, -self.p)

    def radial_cdf(self, r):
        r = np.asarray(r, float)
        with np.errstate(over="ignore"):
            return -np.expm1((1.0 - self.q) * np.log1p(r * r / self.d))

    def tail_radius(self, eps: float = TAIL_EPS) -> float:
        expo = math.log(1.0 / eps) / (self.q - 1.0)
        if expo > 700:
            return math.inf
        return math.sqrt(self.d * math.expm1(expo))

    def temporal_ppf(self, u):
        return self.c * np.expm1(-np.log1p(-np.asarray(u, float)) / (self.p - 1.0))

    def sample_displacements(self, rng, n, lags=None):
        u = 1.0 - rng.random(n)
        r = np.sqrt(self.d * np.expm1(-np.log(u) / (self.q - 1.0)))
        ang = rng.uniform(0.0, 2.0 * np.pi, n)
        return r * np.cos(ang), r * np.sin(ang)

    def default_pads(self) -> tuple[float, float]:
        return 50.0 * self.c, 5.0 * math.sqrt(self.d)


@dataclass(frozen=True, eq=False)
class Histogram:
    """Piecewise-constant g on (lag bin x radial annulus) cells."""

    time_edges: np.ndarray
    radius_edges: np.ndarray
    cell_values: np.ndarray
    kind = 2

    def __post_init__(self):
        te = np.asarray(self.time_edges, float)
        re = np.asarray(self.radius_edges, float)
        vals = np.asarray(self.cell_values, float).reshape(te.size - 1, re.size - 1)
        if te.size < 2 or re.size < 2:
            raise ParameterError("need at least one time and one radius bin")
        if np.any(np.diff(te) <= 0) or np.any(np.diff(re) <= 0):
            raise ParameterError("bin edges must be strictly increasing")
        if te[0] < 0 or re[0] < 0:
            raise ParameterError("bin edges must be non-negative")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ParameterError("cell values must be finite and >= 0")
        for name, arr in (("time_edges", te), ("radius_edges", re), ("cell_values", vals)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        return (isinstance(other, Histogram)
                and np.array_equal(self.time_edges, other.time_edges)
                and np.array_equal(self.radius_edges, other.radius_edges)
                and np.array_equal(self.cell_values, other.cell_values))

    __hash__ = None

    @property
    def param_names(self):
        na, nb = self.cell_values.shape
        return tuple(f"g_{a}_{b}" for a in range(na) for b in range(nb))

    @property
    def shape(self):
        return self.cell_values.shape

    def kernel_args(self):
        return 2, _EMPTY, self.time_edges, self.radius_edges, self.cell_values.ravel()

    def params(self) -> np.ndarray:
        return self.cell_values.ravel().copy()

    def with_params(self, vec) -> "Histogram":
        return Histogram(self.time_edges, self.radius_edges, np.asarray(vec, float))

    def kmul(self, marks, n: int) -> np.ndarray:
        return np.ones(n)

    @property
    def time_widths(self):
        return np.diff(self.time_edges)

    @property
    def annulus_areas(self):
        return np.pi * np.diff(self.radius_edges ** 2)

    def cell_measures(self) -> np.ndarray:
        return self.time_widths[:, None] * self.annulus_areas[None, :]

    def mass(self, mark=None, max_lag: float = np.inf) -> float:
        ov = _interval_overlap(0.0, max_lag, self.time_edges[:-1], self.time_edges[1:])
        return float(np.sum(self.cell_values * ov[:, None] * self.annulus_areas[None, :]))

    def value(self, dx, dy, dt, mark=None, max_lag: float = np.inf):
        kind, par, te, re, vals = self.kernel_args()
        r2 = np.asarray(dx, float) ** 2 + np.asarray(dy, float) ** 2
        return core_g(kind, par, te, re, vals, dt, r2, max_lag)

    def tail_radius(self, eps: float = TAIL_EPS) -> float:
        return float(self.radius_edges[-1])

    def annulus_measure_in(self, cx, cy, region, panels: int = 16) -> np.ndarray:
        """(n_parents, n_radius_bins) area of each annulus inside ``region``."""
        cx = np.atleast_1d(np.asarray(cx, float))
        cy = np.atleast_1d(np.asarray(cy, float))
        re = self.radius_edges
        if region is None:
            return np.broadcast_to(self.annulus_areas, (cx.size, re.size - 1)).copy()
        out = np.empty((cx.size, re.size - 1))
        for b in range(re.size - 1):
            r0, r1 = re[b], re[b + 1]

            def measure(r, r0=r0, r1=r1):
                rc = np.clip(r, r0, r1)
                return np.pi * (rc * rc - r0 * r0)

            out[:, b] = radial_mass_in_polygon(cx, cy, region.vertices, measure,
                                               tail_radius=r1, kinks=(r0, r1), panels=panels)
        return out

    def lag_overlaps(self, lag_lo, lag_hi, max_lag=np.inf) -> np.ndarray:
        lo = np.minimum(np.atleast_1d(np.asarray(lag_lo, float)), max_lag)
        hi = np.minimum(np.atleast_1d(np.asarray(lag_hi, float)), max_lag)
        te = self.time_edges
        return _interval_overlap(lo[:, None], hi[:, None], te[None, :-1], te[None, 1:])

    def window_mass(self, cx, cy, marks, lag_lo, lag_hi, region=None,
                    max_lag: float = np.inf, panels: int = 16) -> np.ndarray:
        cx = np.atleast_1d(np.asarray(cx, float))
        ov = self.lag_overlaps(np.broadcast_to(lag_lo, cx.shape), np.broadcast_to(lag_hi, cx.shape), max_lag)
        area = self.annulus_measure_in(cx, cy, region, panels)
        return np.einsum("ia,ab,ib->i", ov, self.cell_values, area)

    def cell_exposure(self, cx, cy, lag_lo, lag_hi, region=None, max_lag=np.inf) -> np.ndarray:
        """Sum over parents of (lag overlap) x (annulus area in region), per cell."""
        cx = np.atleast_1d(np.asarray(cx, float))
        ov = self.lag_overlaps(np.broadcast_to(lag_lo, cx.shape), np.broadcast_to(lag_hi, cx.shape), max_lag)
        area = self.annulus_measure_in(cx, cy, region)
        return ov.T @ area

    def _row_rates(self):
        return self.cell_values @ self.annulus_areas

    def time_rate(self, lag, max_lag=np.inf):
        lag = np.asarray(lag, float)
        te = self.time_edges
        a = np.searchsorted(te, lag, side="right") - 1
        ok = (lag > 0) & (lag <= max_lag) & (a >= 0) & (a < te.size - 1)
        rates = self._row_rates()
        return np.where(ok, rates[np.clip(a, 0, te.size - 2)], 0.0)

    def time_rate_sup(self, lag, max_lag=np.inf):
        lag = np.asarray(lag, float)
        te = self.time_edges
        rates = self._row_rates()
        # suffix maxima over bins whose upper edge lies beyond the lag
        suffix = np.maximum.accumulate(rates[::-1])[::-1]
        a = np.searchsorted(te[1:], np.maximum(lag, 0.0), side="right")
        ok = (a < te.size - 1) & (lag <= max_lag)
        return np.where(ok, suffix[np.clip(a, 0, te.size - 2)], 0.0)

    def _cell_probs(self):
        w = self.cell_values * self.cell_measures()
        s = w.sum()
        return w.ravel() / s if s > 0 else None

    def _radial_draw(self, rng, b):
        r0 = self.radius_edges[b]
        r1 = self.radius_edges[b + 1]
        r = np.sqrt(r0 * r0 + rng.random(b.size) * (r1 * r1 - r0 * r0))
        ang = rng.uniform(0.0, 2.0 * np.pi, b.size)
        return r * np.cos(ang), r * np.sin(ang)

    def sample_offsets(self, rng, n: int, max_lag: float = np.inf):
        if max_lag < self.time_edges[-1]:
            return self.truncated(max_lag).sample_offsets(rng, n)
        probs = self._cell_probs()
        if probs is None or n == 0:
            e = np.empty(0)
            return e, e.copy(), e.copy()
        cells = rng.choice(probs.size, size=n, p=probs)
        nb = self.radius_edges.size - 1
        a, b = np.divmod(cells, nb)
        te = self.time_edges
        dt = te[a] + rng.random(n) * (te[a + 1] - te[a])
        dx, dy = self._radial_draw(rng, b)
        return dt, dx, dy

    def sample_displacements(self, rng, n, lags=None):
        lags = np.atleast_1d(np.asarray(lags, float))
        te = self.time_edges
        a = np.clip(np.searchsorted(te, lags, side="right") - 1, 0, te.size - 2)
        w = self.cell_values[a] * self.annulus_areas[None, :]
        cum = np.cumsum(w, axis=1)
        u = rng.random(lags.size) * cum[:, -1]
        b = np.minimum((cum < u[:, None]).sum(axis=1), cum.shape[1] - 1)
        return self._radial_draw(rng, b)

    def default_pads(self) -> tuple[float, float]:
        return float(self.time_edges[-1]), float(self.radius_edges[-1])

    def truncated(self, max_lag: float) -> "Histogram":
        """Equivalent histogram whose support ends at ``max_lag``."""
        te = self.time_edges
        if max_lag >= te[-1]:
            return self
        k = int(np.searchsorted(te, max_lag, side="left"))
        edges = np.concatenate([te[:k], [max_lag]])
        if edges.size < 2:
            raise ParameterError("max_lag precedes the first time edge")
        return Histogram(edges, self.radius_edges, self.cell_values[: edges.size - 1])


_EMPTY = np.zeros(1)
_EMPTY.setflags(write=False)

TriggeringFamily = GaussianExponential | EtasPowerLaw | Histogram


def core_g(kind, par, te, re, vals, dt, r2, max_lag=np.inf):
    from ._pycore import g_pairs
    return g_pairs(kind, par, te, re, vals, dt, r2, max_lag)


# --------------------------------------------------------------------------
# Backgrounds
# --------------------------------------------------------------------------


def _uniform_in_region(rng, region, n):
    x0, x1, y0, y1 = region.bounds
    if isinstance(region, Rectangle):
        return rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)
    xs, ys = [], []
    have = 0
    frac = region.area() / ((x1 - x0) * (y1 - y0))
    while have < n:
        k = max(16, int(1.2 * (n - have) / frac) + 8)
        x = rng.uniform(x0, x1, k)
        y = rng.uniform(y0, y1, k)
        ok = region.contains(x, y)
        xs.append(x[ok])
        ys.append(y[ok])
        have += int(ok.sum())
    return np.concatenate(xs)[:n], np.concatenate(ys)[:n]


@dataclass(frozen=True)
class Constant:
    nu: float
    param_names = ("nu",)

    def __post_init__(self):
        if not (math.isfinite(self.nu) and self.nu >= 0):
            raise ParameterError(f"nu must be >= 0, got {self.nu}")

    def params(self):
        return np.array([self.nu])

    def with_params(self, vec):
        return Constant(float(vec[0]))

    def value(self, x, y):
        return np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, self.nu)

    def integral(self, region) -> float:
        return self.nu * region.area()

    def inf(self, region, resolution: int = 200) -> float:
        return self.nu

    def sup(self, region, resolution: int = 200) -> float:
        return self.nu

    def sample(self, rng, region, t0, t1):
        n = rng.poisson(self.nu * region.area() * (t1 - t0)) if self.nu > 0 else 0
        x, y = _uniform_in_region(rng, region, n)
        return rng.uniform(t0, t1, n), x, y

    def sample_location(self, rng, region):
        x, y = _uniform_in_region(rng, region, 1)
        return float(x[0]), float(y[0])


@dataclass(frozen=True, eq=False)
class WeightedKde:
    """mu(s) = sum_i w_i / (2 pi h_i^2 T) exp(-|s - s_i|^2 / (2 h_i^2))."""

    points: np.ndarray
    weights: np.ndarray
    bandwidth: np.ndarray | float
    time_norm: float
    param_names = ()

    def __post_init__(self):
        pts = np.asarray(self.points, float).reshape(-1, 2)
        w = np.broadcast_to(np.asarray(self.weights, float), (pts.shape[0],)).copy()
        h = np.broadcast_to(np.asarray(self.bandwidth, float), (pts.shape[0],)).copy()
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ParameterError("KDE weights must be finite and >= 0")
        if np.any(h <= 0) or not np.all(np.isfinite(h)):
            raise ParameterError("KDE bandwidths must be positive")
        _positive("time_norm", self.time_norm)
        for name, arr in (("points", pts), ("weights", w), ("bandwidth", h)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def params(self):
        return np.empty(0)

    def with_params(self, vec):
        return self

    def value(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        shape = np.broadcast(x, y).shape
        xf = np.broadcast_to(x, shape).ravel()
        yf = np.broadcast_to(y, shape).ravel()
        out = np.zeros(xf.size)
        coef = self.weights / (2.0 * np.pi * self.bandwidth ** 2 * self.time_norm)
        inv = 0.5 / self.bandwidth ** 2
        step = max(1, 4_000_000 // max(1, len(self.weights)))
        for s in range(0, xf.size, step):
            dx = xf[s:s + step, None] - self.points[None, :, 0]
            dy = yf[s:s + step, None] - self.points[None, :, 1]
            out[s:s + step] = np.exp(-(dx * dx + dy * dy) * inv[None, :]) @ coef
        return out.reshape(shape)

    def component_mass(self, region) -> np.ndarray:
        cx, cy = self.points[:, 0], self.points[:, 1]
        if isinstance(region, Rectangle):
            return _gauss_rect_mass(cx, cy, self.bandwidth, region)
        out = np.empty(cx.size)
        for h in np.unique(self.bandwidth):
            sel = self.bandwidth == h
            out[sel] = radial_mass_in_polygon(
                cx[sel], cy[sel], region.vertices,
                lambda r, h=h: -np.expm1(-r * r / (2.0 * h * h)),
                tail_radius=h * math.sqrt(2.0 * math.log(1.0 / TAIL_EPS)))
        return out

    def integral(self, region) -> float:
        return float(np.sum(self.weights * self.component_mass(region)) / self.time_norm)

    def _grid_values(self, region, n=100):
        x0, x1, y0, y1 = region.bounds
        gx, gy = np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n))
        inside = region.contains(gx, gy)
        return self.value(gx[inside], gy[inside])

    def inf(self, region, resolution: int = 200) -> float:
        vals = np.concatenate([self._grid_values(region, resolution),
                               self.value(region.vertices[:, 0], region.vertices[:, 1])])
        return float(vals.min())

    def sup(self, region, resolution: int = 200) -> float:
        vals = np.concatenate([self._grid_values(region, resolution),
                               self.value(self.points[:, 0], self.points[:, 1])])
        return float(vals.max())

    def sample(self, rng, region, t0, t1):
        # superposition of weighted Gaussian components, restricted to region
        counts = rng.poisson(self.weights * (t1 - t0) / self.time_norm)
        comp = np.repeat(np.arange(counts.size), counts)
        x = self.points[comp, 0] + rng.normal(0.0, 1.0, comp.size) * self.bandwidth[comp]
        y = self.points[comp, 1] + rng.normal(0.0, 1.0, comp.size) * self.bandwidth[comp]
        t = rng.uniform(t0, t1, comp.size)
        keep = region.contains(x, y)
        return t[keep], x[keep], y[keep]

    def sample_location(self, rng, region):
        p = self.weights / self.weights.sum()
        for _ in range(100_000):
            k = rng.choice(p.size, p=p)
            x = self.points[k, 0] + rng.normal() * self.bandwidth[k]
            y = self.points[k, 1] + rng.normal() * self.bandwidth[k]
            if region.contains(x, y):
                return float(x), float(y)
        raise RuntimeError("background has negligible mass inside the region")


@dataclass(frozen=True, eq=False)
class GridField:
    """Piecewise-constant rate on a rectangular grid; zero outside it."""

    x_edges: np.ndarray
    y_edges: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        xe = np.asarray(self.x_edges, float)
        ye = np.asarray(self.y_edges, float)
        v = np.asarray(self.values, float).reshape(xe.size - 1, ye.size - 1)
        if np.any(np.diff(xe) <= 0) or np.any(np.diff(ye) <= 0):
            raise ParameterError("grid edges must be strictly increasing")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ParameterError("grid values must be finite and >= 0")
        for name, arr in (("x_edges", xe), ("y_edges", ye), ("values", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def param_names(self):
        nx, ny = self.values.shape
        return tuple(f"mu_{i}_{j}" for i in range(nx) for j in range(ny))

    def params(self):
        return self.values.ravel().copy()

    def with_params(self, vec):
        return GridField(self.x_edges, self.y_edges, np.asarray(vec, float))

    def cell_index(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        i = np.searchsorted(self.x_edges, x, side="right") - 1
        j = np.searchsorted(self.y_edges, y, side="right") - 1
        # the closing edges belong to the last cell
        i = np.where(x == self.x_edges[-1], self.x_edges.size - 2, i)
        j = np.where(y == self.y_edges[-1], self.y_edges.size - 2, j)
        ok = (i >= 0) & (i < self.x_edges.size - 1) & (j >= 0) & (j < self.y_edges.size - 1)
        return i, j, ok

    def value(self, x, y):
        i, j, ok = self.cell_index(x, y)
        out = np.zeros(np.shape(ok))
        out[ok] = self.values[i[ok], j[ok]]
        return out

    def cell_areas_in(self, region) -> np.ndarray:
        xe, ye = self.x_edges, self.y_edges
        if isinstance(region, Rectangle):
            ox = _interval_overlap(xe[:-1], xe[1:], region.x_min, region.x_max)
            oy = _interval_overlap(ye[:-1], ye[1:], region.y_min, region.y_max)
            return ox[:, None] * oy[None, :]
        import shapely
        poly = shapely.Polygon(region.vertices)
        boxes = shapely.box(xe[:-1, None], ye[None, :-1], xe[1:, None], ye[None, 1:])
        return shapely.area(shapely.intersection(boxes, poly))

    def integral(self, region) -> float:
        return float(np.sum(self.values * self.cell_areas_in(region)))

    def inf(self, region, resolution: int = 200) -> float:
        areas = self.cell_areas_in(region)
        inner = self.values[areas > 0]
        covered = areas.sum()
        vmin = float(inner.min()) if inner.size else 0.0
        if covered < region.area() * (1 - 1e-12):
            vmin = 0.0
        return vmin

    def sup(self, region, resolution: int = 200) -> float:
        areas = self.cell_areas_in(region)
        inner = self.values[areas > 0]
        return float(inner.max()) if inner.size else 0.0

    def sample(self, rng, region, t0, t1):
        # Lewis thinning against the largest cell rate
        top = self.sup(region)
        if top <= 0:
            e = np.empty(0)
            return e, e.copy(), e.copy()
        t, x, y = Constant(top).sample(rng, region, t0, t1)
        keep = rng.random(t.size) * top < self.value(x, y)
        return t[keep], x[keep], y[keep]

    def sample_location(self, rng, region):
        top = self.sup(region)
        for _ in range(1_000_000):
            x, y = _uniform_in_region(rng, region, 1)
            if rng.random() * top < self.value(x[0], y[0]):
                return float(x[0]), float(y[0])
        raise RuntimeError("background has negligible mass inside the region")


BackgroundModel = Constant | WeightedKde | GridField


# --------------------------------------------------------------------------
# Intensity model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IntensityModel:
    background: BackgroundModel
    triggering: TriggeringFamily | None = None
    max_lag: float = np.inf

    def __post_init__(self):
        if not (self.max_lag > 0):
            raise ParameterError("max_lag must be positive")

    @property
    def uses_marks(self) -> bool:
        return isinstance(self.triggering, EtasPowerLaw)

    # parameter vector ---------------------------------------------------
    @property
    def param_names(self) -> tuple[str, ...]:
        names = tuple(self.background.param_names)
        if self.triggering is not None:
            names += tuple(self.triggering.param_names)
        return names

    def params(self) -> np.ndarray:
        parts = [self.background.params()]
        if self.triggering is not None:
            parts.append(self.triggering.params())
        return np.concatenate(parts)

    def with_params(self, vec) -> "IntensityModel":
        vec = np.asarray(vec, float)
        nb = len(self.background.param_names)
        bg = self.background.with_params(vec[:nb]) if nb else self.background
        trig = self.triggering.with_params(vec[nb:]) if self.triggering is not None else None
        return replace(self, background=bg, triggering=trig)

    # evaluation ----------------------------------------------------------
    def kmul(self, catalog: EventCatalog) -> np.ndarray:
        if self.triggering is None:
            return np.ones(catalog.n)
        return np.ascontiguousarray(self.triggering.kmul(catalog.mark, catalog.n))

    def trigger_at_events(self, catalog: EventCatalog) -> np.ndarray:
        if self.triggering is None or catalog.n == 0:
            return np.zeros(catalog.n)
        kind, par, te, re, vals = self.triggering.kernel_args()
        return core.event_sums(kind, par, te, re, vals, catalog.t, catalog.x, catalog.y,
                               self.kmul(catalog), float(self.max_lag))

    def intensity_at_events(self, catalog: EventCatalog) -> np.ndarray:
        return self.background.value(catalog.x, catalog.y) + self.trigger_at_events(catalog)

    def trigger_at(self, catalog: EventCatalog, x, y, t) -> np.ndarray:
        x, y, t = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float),
                                      np.asarray(t, float))
        shape = x.shape
        if self.triggering is None or catalog.n == 0:
            return np.zeros(shape)
        kind, par, te, re, vals = self.triggering.kernel_args()
        out = core.point_sums(kind, par, te, re, vals, catalog.t, catalog.x, catalog.y,
                              self.kmul(catalog), float(self.max_lag),
                              np.ascontiguousarray(t.ravel()), np.ascontiguousarray(x.ravel()),
                              np.ascontiguousarray(y.ravel()))
        return out.reshape(shape)

    def evaluate(self, catalog: EventCatalog, x, y, t) -> np.ndarray:
        return self.background.value(x, y) + self.trigger_at(catalog, x, y, t)

    def parent_masses(self, catalog: EventCatalog) -> np.ndarray:
        """Total offspring mass of each event over the plane and all lags."""
        if self.triggering is None:
            return np.zeros(catalog.n)
        km = self.kmul(catalog)
        return km * self.triggering.mass(None, self.max_lag)

    def mean_offspring(self, marks=None) -> float:
        """Branching ratio m; averages over ``marks`` when supplied."""
        if self.triggering is None:
            return 0.0
        base = self.triggering.mass(None, self.max_lag)
        if marks is None:
            return float(base)
        return float(base * np.mean(self.triggering.kmul(np.asarray(marks), len(marks))))

    def window_masses(self, catalog: EventCatalog, lag_lo, lag_hi, region=None,
                      panels: int = 16) -> np.ndarray:
        if self.triggering is None:
            return np.zeros(catalog.n)
        return self.triggering.window_mass(catalog.x, catalog.y, catalog.mark,
                                           lag_lo, lag_hi, region, self.max_lag, panels)


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------


def eval_triggering(model: TriggeringFamily, ds: Sequence[float], dt: float,
                    parent_mark: float | None = None, max_lag: float = np.inf) -> float:
    """g(ds, dt) for one displacement; exactly 0 when dt <= 0."""
    val = model.value(ds[0], ds[1], dt, parent_mark, max_lag)
    return float(np.asarray(val).reshape(-1)[0])


def triggering_mass(model: TriggeringFamily, parent_mark: float | None = None,
                    max_lag: float = np.inf) -> float:
    """Offspring mass m of one parent over the plane and all positive lags."""
    return model.mass(parent_mark, max_lag)


def eval_intensity(model: IntensityModel, catalog: EventCatalog, s: Sequence[float],
                   t: float) -> float:
    """lambda(s, t) using events strictly before t."""
    return float(model.evaluate(catalog, s[0], s[1], t))


def cutoff_lag(family: TriggeringFamily, tail: float = 1e-10) -> float:
    """Lag beyond which the temporal tail mass fraction is below ``tail``."""
    if isinstance(family, Histogram):
        return float(family.time_edges[-1])
    if isinstance(family, GaussianExponential):
        return family.omega * math.log(1.0 / tail)
    expo = math.log(1.0 / tail) / (family.p - 1.0)
    if expo > 700:
        return math.inf
    return family.c * math.expm1(expo)


@dataclass
class IntegralInfo:
    value: float
    method: str
    background: float
    triggered: float
    panels: int = 0
    error_estimate: float = 0.0
    extra: dict = field(default_factory=dict)


def _background_integral(model, domain):
    return model.background.integral(domain.region) * domain.t_end


def integrated_intensity(model: IntensityModel, catalog: EventCatalog,
                         domain: ObservationDomain, method: str = "schoenberg", *,
                         truncate_time: bool = False, tol: float | None = None,
                         info: bool = False):
    """Integral of lambda over X x [0, T).

    ``schoenberg`` integrates each event's triggering over the whole plane
    and all future lags (or up to T - t_i with ``truncate_time``), which
    bounds the exact value from above.  ``cubature`` integrates each
    kernel over X exactly in time and by polar-decomposition quadrature in
    space; its error estimate compares two resolutions and a
    :class:`QuadratureError` is raised if ``tol`` is not met.
    """
    bg = _background_integral(model, domain)
    if model.triggering is None or catalog.n == 0:
        res = IntegralInfo(bg, method, bg, 0.0)
        return res if info else res.value
    remaining = domain.t_end - catalog.t
    if method == "schoenberg":
        hi = remaining if truncate_time else np.full(catalog.n, np.inf)
        trig = float(np.sum(model.window_masses(catalog, 0.0, hi, None)))
        res = IntegralInfo(bg + trig, method, bg, trig)
    elif method == "cubature":
        trig = float(np.sum(model.window_masses(catalog, 0.0, remaining, domain.region)))
        err = 0.0
        panels = 16
        if tol is not None or info:
            exact = (isinstance(model.triggering, GaussianExponential)
                     and isinstance(domain.region, Rectangle))
            if not exact:
                coarse = _coarse_window_total(model, catalog, domain, remaining)
                err = abs(trig - coarse)
        if tol is not None and err > tol * max(1.0, abs(bg + trig)):
            raise QuadratureError(
                f"cubature error estimate {err:.3g} exceeds tolerance {tol:.3g}")
        res = IntegralInfo(bg + trig, method, bg, trig, panels, err)
    else:
        raise ValueError(f"unknown integration method {method!r}")
    return res if info else res.value


def _coarse_window_total(model, catalog, domain, remaining) -> float:
    # same integral at half the angular resolution, for an error estimate
    return float(np.sum(model.window_masses(catalog, 0.0, remaining, domain.region, panels=8)))
