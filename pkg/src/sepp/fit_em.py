"""Log-likelihood, branching probabilities and EM estimation.

The EM fits are generalised EM: every M-step update is accepted only if
it does not decrease the expected complete-data log-likelihood, which
guarantees a non-decreasing observed log-likelihood.  The compensator
used inside the M-step is the same one used for the reported trace, so
the guarantee holds for the numbers actually reported.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from ._backend import core
from ._pycore import g_pairs
from ._radial import PolarRule
from .catalog import EventCatalog, ObservationDomain, Rectangle
from .intensity import (
    Constant,
    EtasPowerLaw,
    GaussianExponential,
    GridField,
    Histogram,
    IntensityModel,
    WeightedKde,
    _gauss_rect_mass,
    integrated_intensity,
)

BRENT_XTOL = 1e-8
# floor on a kernel's in-window mass when renormalising near sharp corners
MIN_KERNEL_MASS = 1e-3


class ZeroIntensityError(ValueError):
    """The conditional intensity vanishes at an observed event."""

    def __init__(self, index: int):
        super().__init__(f"zero intensity at event index {index}")
        self.index = index


def _check_positive(lam):
    bad = np.flatnonzero(~(lam > 0))
    if bad.size:
        raise ZeroIntensityError(int(bad[0]))


# --------------------------------------------------------------------------
# Likelihood
# --------------------------------------------------------------------------


def log_likelihood(model: IntensityModel, catalog: EventCatalog, domain: ObservationDomain,
                   method: str = "cubature", subregion=None) -> float:
    """Sum of log intensities at events minus the integrated intensity.

    ``subregion`` gives the interior-subdomain variant: only events inside
    it contribute log terms and the integral runs over it, while the
    history still uses every event of the catalog.
    """
    lam = model.intensity_at_events(catalog)
    if subregion is None:
        _check_positive(lam)
        return float(np.sum(np.log(lam)) - integrated_intensity(model, catalog, domain, method))
    inside = subregion.contains(catalog.x, catalog.y)
    _check_positive(np.where(inside, lam, 1.0))
    comp = model.background.integral(subregion) * domain.t_end
    if model.triggering is not None and catalog.n:
        remaining = domain.t_end - catalog.t
        hi = remaining if method == "cubature" else np.full(catalog.n, np.inf)
        comp += float(np.sum(model.window_masses(catalog, 0.0, hi,
                                                 subregion if method == "cubature" else None)))
    return float(np.sum(np.log(lam[inside])) - comp)


@dataclass
class BranchingMatrix:
    """Pr(u_i = 0) per event and the sparse lower-triangular Pr(u_i = j).

    Event indices are 0-based; ``child[k]`` descends from ``parent[k]``
    with probability ``prob[k]``, sorted by child then parent.
    """

    p_background: np.ndarray
    child: np.ndarray
    parent: np.ndarray
    prob: np.ndarray

    @property
    def n(self) -> int:
        return self.p_background.size

    def row_sums(self) -> np.ndarray:
        return self.p_background + np.bincount(self.child, weights=self.prob, minlength=self.n)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = np.searchsorted(self.child, [i, i + 1])
        return self.parent[lo:hi], self.prob[lo:hi]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self.child, self.parent] = self.prob
        return out

    def expected_background(self) -> float:
        return float(np.sum(self.p_background))


def branching_probabilities(model: IntensityModel, catalog: EventCatalog,
                            threshold: float = 0.0) -> BranchingMatrix:
    """Pr(u_i = j) = g_ij / lambda_i and Pr(u_i = 0) = mu_i / lambda_i.

    Pairs with probability at or below ``threshold`` are not stored; with
    the default 0 every pair with g > 0 is kept and rows sum to one.
    """
    mu = model.background.value(catalog.x, catalog.y)
    if model.triggering is None or catalog.n == 0:
        _check_positive(mu)
        e = np.empty(0, np.int64)
        return BranchingMatrix(np.ones(catalog.n), e, e.copy(), np.empty(0))
    lam = mu + model.trigger_at_events(catalog)
    _check_positive(lam)
    kind, par, te, re, vals = model.triggering.kernel_args()
    ii, jj, pp = core.pair_probs(kind, par, te, re, vals, catalog.t, catalog.x, catalog.y,
                                 model.kmul(catalog), float(model.max_lag), lam, float(threshold))
    return BranchingMatrix(mu / lam, np.asarray(ii), np.asarray(jj), np.asarray(pp))


# --------------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------------


def fd_steps(theta: np.ndarray) -> np.ndarray:
    return np.maximum(1e-5 * np.abs(theta), 1e-7)


def _analytic_jacobian(model: IntensityModel, catalog: EventCatalog):
    bg, fam = model.background, model.triggering
    if isinstance(bg, Constant):
        cols = [np.ones(catalog.n)]
        mu = np.full(catalog.n, bg.nu)
    elif isinstance(bg, GridField):
        i, j, ok = bg.cell_index(catalog.x, catalog.y)
        nx, ny = bg.values.shape
        block = np.zeros((catalog.n, nx * ny))
        block[np.flatnonzero(ok), (i * ny + j)[ok]] = 1.0
        cols = list(block.T)
        mu = bg.value(catalog.x, catalog.y)
    else:
        return None
    if fam is None:
        return mu, np.column_stack(cols) if cols else np.zeros((catalog.n, 0))
    if not isinstance(fam, GaussianExponential):
        return None
    th, om, s2 = fam.theta, fam.omega, fam.sigma2
    g0, g1, g2 = core.gexp_moments(np.array([1.0, om, s2]), catalog.t, catalog.x, catalog.y,
                                   np.ones(catalog.n), float(model.max_lag))
    lam = mu + th * g0
    cols += [g0, th * (g1 / om ** 2 - g0 / om), th * (g2 / (2.0 * s2 ** 2) - g0 / s2)]
    return lam, np.column_stack(cols)


def intensity_jacobian(model: IntensityModel, catalog: EventCatalog, analytic: bool = True,
                       steps=None, stencil: int = 3):
    """lambda at events and d lambda / d theta (n x k).

    Returns ``(lam, jac, how)`` where ``how`` is "analytic" or
    "finite-difference".  Central differences use steps
    max(1e-5 |theta_k|, 1e-7); ``stencil=5`` selects the five-point rule.
    """
    if analytic:
        res = _analytic_jacobian(model, catalog)
        if res is not None:
            return res[0], res[1], "analytic"
    theta = model.params()
    h = fd_steps(theta) if steps is None else np.asarray(steps, float)
    lam = model.intensity_at_events(catalog)
    jac = np.empty((catalog.n, theta.size))

    def at(vec):
        return model.with_params(vec).intensity_at_events(catalog)

    for k in range(theta.size):
        e = np.zeros(theta.size)
        e[k] = h[k]
        if stencil == 5:
            jac[:, k] = (-at(theta + 2 * e) + 8 * at(theta + e) - 8 * at(theta - e)
                         + at(theta - 2 * e)) / (12 * h[k])
        else:
            jac[:, k] = (at(theta + e) - at(theta - e)) / (2 * h[k])
    return lam, jac, "finite-difference"


def log_likelihood_gradient(model: IntensityModel, catalog: EventCatalog,
                            domain: ObservationDomain, method: str = "cubature") -> np.ndarray:
    """Gradient of :func:`log_likelihood` in the model's parameter order."""
    lam, jac, _ = intensity_jacobian(model, catalog)
    _check_positive(lam)
    theta = model.params()
    h = fd_steps(theta)
    grad = jac.T @ (1.0 / lam)
    for k in range(theta.size):
        e = np.zeros(theta.size)
        e[k] = h[k]
        up = integrated_intensity(model.with_params(theta + e), catalog, domain, method)
        dn = integrated_intensity(model.with_params(theta - e), catalog, domain, method)
        grad[k] -= (up - dn) / (2 * h[k])
    return grad


# --------------------------------------------------------------------------
# EM
# --------------------------------------------------------------------------


@dataclass
class FitResult:
    model: IntensityModel
    loglik_trace: list[float]
    iterations: int
    converged: bool
    branching: BranchingMatrix | None
    method: str = "cubature"
    at_bound: list[str] = field(default_factory=list)
    message: str = ""
    n_free: int = 0
    empty_cells: list[tuple[int, int]] = field(default_factory=list)

    @property
    def theta_hat(self) -> np.ndarray:
        return self.model.params()

    @property
    def param_names(self) -> tuple[str, ...]:
        return self.model.param_names

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    def report(self) -> dict[str, str]:
        out = {name: f"{v:.12g}" for name, v in zip(self.param_names, self.theta_hat)}
        out.update(loglik=f"{self.loglik:.12g}", iterations=str(self.iterations),
                   converged=str(self.converged).lower(), n_free=str(self.n_free),
                   method=self.method, at_bound=",".join(self.at_bound), message=self.message)
        return out


def _maximise(fun, x0, lo, hi, span):
    """Bounded Brent search for max of fun on [x0 - span, x0 + span] within [lo, hi]."""
    a, b = max(lo, x0 - span), min(hi, x0 + span)
    if not a < b:
        return x0, fun(x0)
    res = minimize_scalar(lambda v: -fun(v), bounds=(a, b), method="bounded",
                          options={"xatol": BRENT_XTOL})
    return float(res.x), -float(res.fun)


def _coordinate_ascent(q, x, bounds, span=3.0, sweeps=1):
    """Coordinate Brent ascent of q(vector); never returns a worse point."""
    x = np.array(x, float)
    best = q(x)
    for _ in range(sweeps):
        start = best
        for k in range(x.size):
            lo, hi = bounds[k]

            def f(v, k=k):
                y = x.copy()
                y[k] = v
                return q(y)

            v, val = _maximise(f, float(np.clip(x[k], lo, hi)), lo, hi, span)
            if val > best:
                x[k] = v
                best = val
        if best - start < 1e-12 * (1 + abs(best)):
            break
    return x, best


class _SpatialMass:
    """Spatial mass inside X of isotropic kernels centred at the events."""

    def __init__(self, catalog, domain, method):
        self.catalog = catalog
        self.region = domain.region
        self.full = method == "schoenberg"
        self._rule = None

    def __call__(self, family) -> np.ndarray:
        if self.full:
            return np.ones(self.catalog.n)
        if isinstance(family, GaussianExponential) and isinstance(self.region, Rectangle):
            return _gauss_rect_mass(self.catalog.x, self.catalog.y, math.sqrt(family.sigma2),
                                    self.region)
        return self.rule()(family.radial_cdf)

    def rule(self):
        """The polar rule for the window, or None under the full-plane integral."""
        if self.full:
            return None
        if self._rule is None:
            self._rule = PolarRule(self.catalog.x, self.catalog.y, self.region.vertices)
        return self._rule


class _GEStep:
    def __init__(self, catalog, domain, method, max_lag):
        self.cat = catalog
        self.T = domain.t_end
        self.area = domain.area
        rem = domain.t_end - catalog.t if method == "cubature" else np.full(catalog.n, np.inf)
        self.hi = np.minimum(rem, max_lag)
        self.max_lag = float(max_lag)
        self.smass = _SpatialMass(catalog, domain, method)
        self._S = None

    def trigger(self, fam):
        self.mom = core.gexp_moments(np.array([1.0, fam.omega, fam.sigma2]), self.cat.t,
                                     self.cat.x, self.cat.y, np.ones(self.cat.n), self.max_lag)
        self._S = (fam.sigma2, self.smass(fam))
        return fam.theta * self.mom[0]

    def compensator(self, fam):
        S = self._S[1] if self._S and self._S[0] == fam.sigma2 else self.smass(fam)
        return fam.theta * float(np.sum(fam.temporal_cdf(self.hi) * S))

    def mstep(self, fam, lam):
        w = fam.theta / lam
        W, A, B = (float(np.dot(m, w)) for m in self.mom)
        if W <= 0:
            return fam.with_params([0.0, fam.omega, fam.sigma2])
        H = lambda om: -np.expm1(-self.hi / om)
        S0 = self._S[1]
        cache = {fam.sigma2: S0}

        def S(s2):
            if s2 not in cache:
                cache.clear()
                cache[s2] = self.smass(GaussianExponential(1.0, 1.0, s2))
            return cache[s2]

        def q(v):
            om, s2 = math.exp(v[0]), math.exp(v[1])
            tot = float(np.sum(H(om) * S(s2)))
            if not tot > 0:
                return -np.inf
            return -W * math.log(tot) - W * v[0] - A / om - W * v[1] - B / (2 * s2)

        x0 = np.log([fam.omega, fam.sigma2])
        # moment estimates are the exact optimum without edge effects
        x_mom = np.log([max(A / W, 1e-300), max(B / (2 * W), 1e-300)])
        if q(x_mom) > q(x0):
            x0 = x_mom
        x, _ = _coordinate_ascent(q, x0, self.bounds)
        om, s2 = math.exp(x[0]), math.exp(x[1])
        theta = W / float(np.sum(H(om) * S(s2)))
        return GaussianExponential(theta, om, s2)

    @property
    def bounds(self):
        return [(math.log(1e-9 * self.T), math.log(1e3 * self.T)),
                (math.log(1e-12 * self.area), math.log(1e3 * self.area))]

    def clip(self, fam):
        (a, b), (c, d) = self.bounds
        return GaussianExponential(fam.theta, float(np.clip(fam.omega, math.exp(a), math.exp(b))),
                                   float(np.clip(fam.sigma2, math.exp(c), math.exp(d))))

    def flag_bounds(self, fam):
        out = []
        if fam.theta < 1e-10:
            out.append("theta")
        for name, v, (lo, hi) in zip(("omega", "sigma2"), np.log([fam.omega, fam.sigma2]), self.bounds):
            if v - lo < 1e-6 or hi - v < 1e-6:
                out.append(name)
        return out


ETAS_BOUNDS = {
    "alpha": (-10.0, 10.0),
    "log_p1": (math.log(1e-4), math.log(20.0)),
    "log_q1": (math.log(1e-4), math.log(50.0)),
}


class _EtasStep:
    def __init__(self, catalog, domain, method, max_lag, marked, M0):
        self.cat = catalog
        self.T = domain.t_end
        self.area = domain.area
        self.marked = marked
        rem = domain.t_end - catalog.t if method == "cubature" else np.full(catalog.n, np.inf)
        self.hi = np.minimum(rem, max_lag)
        self.max_lag = float(max_lag)
        i, j, dt, r2 = core.collect_pairs(catalog.t, catalog.x, catalog.y, float(max_lag))
        self.i, self.j, self.dt, self.r2 = (np.asarray(a) for a in (i, j, dt, r2))
        m = np.full(catalog.n, M0) if catalog.mark is None else np.asarray(catalog.mark, float)
        self.dm = np.where(np.isnan(m), 0.0, m - M0)
        self.smass = _SpatialMass(catalog, domain, method)
        self._S = None

    def trigger(self, fam):
        km = fam.kmul(self.cat.mark, self.cat.n)
        par = np.array([fam.K0, fam.c, fam.p, fam.d, fam.q])
        self.g = km[self.j] * g_pairs(1, par, None, None, None, self.dt, self.r2, self.max_lag)
        self._S = ((fam.d, fam.q), self.smass(fam))
        return np.bincount(self.i, weights=self.g, minlength=self.cat.n)

    def _time_int(self, c, p):
        # integral over [0, hi_j] of (u + c)^(-p)
        return -np.expm1((1 - p) * (np.log(self.hi + c) - math.log(c))) * c ** (1 - p) / (p - 1)

    def compensator(self, fam):
        S = self._S[1] if self._S and self._S[0] == (fam.d, fam.q) else self.smass(fam)
        km = fam.kmul(self.cat.mark, self.cat.n)
        return fam.K0 * float(np.sum(km * self._time_int(fam.c, fam.p) * S))

    def mstep(self, fam, lam):
        pr = self.g / lam[self.i]
        W = float(pr.sum())
        if W <= 0:
            return fam.with_params([0.0, fam.alpha, fam.c, fam.p, fam.d, fam.q])
        sm = float(np.dot(pr, self.dm[self.j]))
        S0 = self._S[1]
        (c_lo, c_hi) = self.bounds[1]

        # temporal block with the spatial kernel fixed; coordinates
        # (c / (p - 1), p - 1) on log scales follow the ridge towards the
        # exponential limit, along which only the second moves
        def unpack(v):
            alpha = v[0] if self.marked else fam.alpha
            p1 = math.exp(v[2])
            return alpha, math.exp(v[1]) * p1, 1 + p1

        def q_time(v):
            alpha, c, p = unpack(v)
            if not c_lo <= math.log(c) <= c_hi:
                return -np.inf
            D = float(np.sum(np.exp(alpha * self.dm) * self._time_int(c, p) * S0))
            if not (D > 0 and math.isfinite(D)):
                return -np.inf
            return (-W * math.log(D) + alpha * sm
                    - p * float(np.dot(pr, np.log(self.dt + c))))

        x0 = np.array([fam.alpha, math.log(fam.c / (fam.p - 1)), math.log(fam.p - 1)])
        b = self.bounds
        bounds = [b[0] if self.marked else (fam.alpha, fam.alpha), (-60.0, 60.0), b[2]]
        xt, _ = _coordinate_ascent(q_time, x0, bounds, span=2.0)
        alpha, c, p = unpack(xt)
        a = np.exp(alpha * self.dm) * self._time_int(c, p)
        xs = self._spatial_newton(pr, W, a, np.array([math.log(fam.d), math.log(fam.q - 1)]))
        d, qq = math.exp(xs[0]), 1 + math.exp(xs[1])
        S = self.smass(EtasPowerLaw(1.0, 0.0, 1.0, 2.0, d, qq))
        K0 = W / float(np.sum(a * S))
        return EtasPowerLaw(K0, alpha, c, p, d, qq, M0=fam.M0)

    def _spatial_terms(self, x, pr, W, nodes, deriv):
        """Spatial part of Q in (log d, log(q - 1)) with gradient and Hessian."""
        d, beta = math.exp(x[0]), math.exp(x[1])
        z = self.r2 / d
        L = np.log1p(z)
        Q = W * (x[1] - x[0]) - (1 + beta) * float(np.dot(pr, L))
        D = 1.0  # full-plane: the spatial mass does not depend on (d, q)
        if nodes is not None:
            s, bw, total = nodes
            zn = s / d
            Ln = np.log1p(zn)
            bG = bw * np.exp(-beta * Ln)
            D = total - float(bG.sum())
        if not (D > 0 and math.isfinite(D)):
            return -np.inf, None, None
        Q -= W * math.log(D)
        if not deriv:
            return Q, None, None
        h = z / (1 + z)
        g = np.array([-W + (1 + beta) * float(np.dot(pr, h)), W - beta * float(np.dot(pr, L))])
        H = np.array([[-(1 + beta) * float(np.dot(pr, h * (1 - h))), beta * float(np.dot(pr, h))],
                      [0.0, -beta * float(np.dot(pr, L))]])
        H[1, 0] = H[0, 1]
        if nodes is not None:
            hn = zn / (1 + zn)
            bh, bL = bG * hn, bG * Ln
            Sh, SL = float(bh.sum()), float(bL.sum())
            dD = np.array([-beta * Sh, beta * SL])
            hD = np.array([
                [beta * float(np.dot(bh, 1 - hn)) - beta ** 2 * float(np.dot(bh, hn)),
                 -beta * Sh + beta ** 2 * float(np.dot(bh, Ln))],
                [0.0, beta * SL - beta ** 2 * float(np.dot(bL, Ln))]])
            hD[1, 0] = hD[0, 1]
            g -= W * dD / D
            H -= W * (hD / D - np.outer(dD, dD) / D ** 2)
        return Q, g, H

    def _spatial_newton(self, pr, W, a, x, max_iter=3):
        """Safeguarded Newton ascent of the spatial block; never moves downhill."""
        rule = self.smass.rule()
        nodes = None
        if rule is not None:
            bw = rule._weight * a[rule._owner]
            nodes = (rule._radius ** 2, bw, float(bw.sum()))
        lo = np.array([self.bounds[3][0], self.bounds[4][0]])
        hi = np.array([self.bounds[3][1], self.bounds[4][1]])
        x = np.clip(x, lo, hi)
        Q, g, H = self._spatial_terms(x, pr, W, nodes, True)
        for _ in range(max_iter):
            # coordinates held at a bound the gradient pushes against stay fixed
            free = ~(((x <= lo) & (g < 0)) | ((x >= hi) & (g > 0)))
            if not free.any():
                break
            w, V = np.linalg.eigh(H[np.ix_(free, free)])
            scale = max(float(np.max(np.abs(w))), 1e-300)
            w = -np.maximum(np.abs(w), 1e-8 * scale)
            step = np.zeros(2)
            step[free] = -(V / w) @ (V.T @ g[free])
            norm = float(np.linalg.norm(step))
            if norm > 2.0:
                step *= 2.0 / norm
            if float(np.dot(g, step)) < 1e-13 * (1 + abs(Q)):
                break
            moved = False
            for _ in range(12):
                y = np.clip(x + step, lo, hi)
                Qy, _, _ = self._spatial_terms(y, pr, W, nodes, False)
                if Qy > Q:
                    moved = True
                    break
                step *= 0.5
            if not moved:
                break
            small = np.max(np.abs(y - x)) < 1e-10 or Qy - Q < 1e-14 * (1 + abs(Q))
            x = y
            Q, g, H = self._spatial_terms(x, pr, W, nodes, True)
            if small:
                break
        return x

    @property
    def bounds(self):
        return [ETAS_BOUNDS["alpha"], (math.log(1e-9 * self.T), math.log(self.T)),
                ETAS_BOUNDS["log_p1"], (math.log(1e-10 * self.area), math.log(10 * self.area)),
                ETAS_BOUNDS["log_q1"]]

    def clip(self, fam):
        b = self.bounds
        alpha = float(np.clip(fam.alpha, *b[0])) if self.marked else fam.alpha
        c, p1, d, q1 = (float(np.exp(np.clip(math.log(v), *lim))) for v, lim in
                        zip((fam.c, fam.p - 1, fam.d, fam.q - 1), b[1:]))
        return EtasPowerLaw(fam.K0, alpha, c, 1 + p1, d, 1 + q1, M0=fam.M0)

    def flag_bounds(self, fam):
        out = []
        if fam.K0 < 1e-12:
            out.append("K0")
        vals = [fam.alpha, math.log(fam.c), math.log(fam.p - 1), math.log(fam.d), math.log(fam.q - 1)]
        names = ["alpha", "c", "p", "d", "q"]
        for name, v, (lo, hi) in zip(names, vals, self.bounds):
            if (name != "alpha" or self.marked) and (v - lo < 1e-6 or hi - v < 1e-6):
                out.append(name)
        return out


class _HistStep:
    def __init__(self, catalog, domain, method, max_lag, fam: Histogram):
        self.cat = catalog
        self.max_lag = float(max_lag)
        if method == "cubature":
            rem = domain.t_end - catalog.t
            self.exposure = fam.cell_exposure(catalog.x, catalog.y, 0.0, rem, domain.region, max_lag)
        else:
            ov = fam.lag_overlaps(np.zeros(1), np.full(1, np.inf), max_lag)[0]
            self.exposure = catalog.n * ov[:, None] * fam.annulus_areas[None, :]

    def trigger(self, fam):
        kind, par, te, re, vals = fam.kernel_args()
        self.fam = fam
        return core.event_sums(kind, par, te, re, vals, self.cat.t, self.cat.x, self.cat.y,
                               np.ones(self.cat.n), self.max_lag)

    def compensator(self, fam):
        return float(np.sum(fam.cell_values * self.exposure))

    def counts(self, fam, lam):
        return core.hist_cells(fam.time_edges, fam.radius_edges, fam.cell_values.ravel(),
                               self.cat.t, self.cat.x, self.cat.y, np.ones(self.cat.n),
                               self.max_lag, 1.0 / lam).reshape(fam.shape)

    def mstep(self, fam, lam):
        N = self.counts(fam, lam)
        vals = np.divide(N, self.exposure, out=np.zeros_like(N), where=self.exposure > 0)
        return fam.with_params(vals)

    def flag_bounds(self, fam):
        return []

    def empty_cells(self, fam):
        return [tuple(map(int, ab)) for ab in np.argwhere(fam.cell_values == 0)]


def _bg_mstep(bg, catalog, domain, p0):
    if isinstance(bg, Constant):
        return Constant(float(np.sum(p0)) / (domain.area * domain.t_end))
    if isinstance(bg, GridField):
        i, j, ok = bg.cell_index(catalog.x, catalog.y)
        nx, ny = bg.values.shape
        sums = np.bincount((i * ny + j)[ok], weights=p0[ok], minlength=nx * ny).reshape(nx, ny)
        areas = bg.cell_areas_in(domain.region) * domain.t_end
        vals = np.divide(sums, areas, out=np.zeros_like(sums), where=areas > 0)
        return bg.with_params(vals)
    return bg


def _free_count(bg, fam, marked):
    k = len(bg.param_names)
    if fam is None:
        return k
    if isinstance(fam, EtasPowerLaw):
        return k + (6 if marked else 5)
    return k + len(fam.param_names)


def _param_change(old, new, floor):
    if old.size == 0:
        return 0.0
    scale = np.maximum(np.abs(old), floor)
    return float(np.max(np.abs(new - old) / scale))


def _to_free(names, theta):
    """Unconstrained coordinates used for extrapolation (-inf marks a zero)."""
    out = np.empty(theta.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, (name, v) in enumerate(zip(names, theta)):
            if name == "alpha":
                out[k] = v
            elif name in ("p", "q"):
                out[k] = np.log(v - 1)
            else:
                out[k] = np.log(v) if v > 0 else -np.inf
    return out


def _from_free(names, u):
    out = np.empty(u.size)
    for k, (name, v) in enumerate(zip(names, u)):
        out[k] = v if name == "alpha" else (1 + math.exp(v) if name in ("p", "q") else math.exp(v))
    return out


def _extrapolation_path(names, th0, th1, th2):
    """SQUAREM points from three successive EM iterates, longest step first.

    The step length starts at -|r| / |v| and is pulled halfway towards -1
    (which reproduces the last EM iterate) on each retry.
    """
    u0, u1, u2 = (_to_free(names, t) for t in (th0, th1, th2))
    ok = np.isfinite(u0) & np.isfinite(u1) & np.isfinite(u2)
    if not np.any(ok):
        return
    r = u1[ok] - u0[ok]
    v = u2[ok] - u1[ok] - r
    nv = float(np.linalg.norm(v))
    if nv == 0:
        return
    step = min(-1.0, -float(np.linalg.norm(r)) / nv)
    sub = np.asarray(names)[ok]
    while step < -1.0 + 1e-3:
        out = th2.copy()
        u = np.clip(u0[ok] - 2 * step * r + step ** 2 * v, -700, 700)
        out[ok] = _from_free(sub, u)
        yield out
        step = 0.5 * (step - 1.0)
        if step > -1.5:
            return


def em_fit(family, background, catalog: EventCatalog, domain: ObservationDomain, *,
           init=None, tol: float = 1e-6, ll_tol: float = 1e-6, max_iter: int = 500,
           method: str = "cubature", max_lag: float = np.inf, fit_background: bool = True,
           fit_triggering: bool = True, accelerate: bool = True) -> FitResult:
    """Fit background and triggering parameters by (generalised) EM.

    ``family`` and ``background`` are model instances whose parameters
    serve as the starting point (``init`` overrides them with a flat
    vector in model order); ``family`` may be None for a Poisson fit.
    Iteration stops once the relative parameter change is below ``tol``
    and the log-likelihood change below ``ll_tol``, or after ``max_iter``
    M-steps, in which case the best-so-far fit is returned with
    ``converged=False``.  ``method`` selects the compensator, "cubature"
    (exact over the window) or "schoenberg" (full-plane, all lags).

    With ``accelerate`` every second M-step is followed by a SQUAREM
    extrapolation on log scales, kept only if it raises the
    log-likelihood, so the trace stays non-decreasing.
    """
    if method not in ("cubature", "schoenberg"):
        raise ValueError(f"unknown integration method {method!r}")
    model = IntensityModel(background, family, max_lag)
    if init is not None:
        model = model.with_params(np.asarray(init, float))
    names = model.param_names
    marked = catalog.mark is not None and np.any(np.isfinite(catalog.mark))
    fam = model.triggering
    if fam is None:
        step = None
    elif isinstance(fam, GaussianExponential):
        step = _GEStep(catalog, domain, method, max_lag)
    elif isinstance(fam, EtasPowerLaw):
        step = _EtasStep(catalog, domain, method, max_lag, marked, fam.M0)
    elif isinstance(fam, Histogram):
        step = _HistStep(catalog, domain, method, max_lag, fam)
    else:
        raise TypeError(f"unsupported triggering family {type(fam).__name__}")
    vol_T = domain.t_end
    fixed_bg = {}

    def estep(m):
        # log-likelihood at m, caching what the next M-step needs
        bg, fam = m.background, m.triggering
        if fit_background or not fixed_bg:
            fixed_bg["v"] = (bg.value(catalog.x, catalog.y), bg.integral(domain.region) * vol_T)
        mu, bg_int = fixed_bg["v"]
        trig = step.trigger(fam) if step is not None else 0.0
        lam = mu + trig
        _check_positive(lam)
        ll = float(np.sum(np.log(lam))) - bg_int - (step.compensator(fam) if step else 0.0)
        return ll, mu, lam

    def mstep(m, mu, lam):
        bg, fam = m.background, m.triggering
        if fit_background:
            bg = _bg_mstep(bg, catalog, domain, mu / lam)
        if step is not None and fit_triggering:
            fam = step.mstep(fam, lam)
        return IntensityModel(bg, fam, max_lag)

    def change(a, b):
        old, new = a.params(), b.params()
        floor = 1e-6 * max(1.0, float(np.max(np.abs(new), initial=0.0))) \
            if isinstance(b.triggering, Histogram) else 1e-10
        return _param_change(old, new, floor)

    def snapshot():
        # E-step caches live on the step object as reassigned (never mutated) attributes
        return dict(step.__dict__) if step is not None else {}, dict(fixed_bg)

    def restore():
        if step is not None:
            step.__dict__.update(saved[0])
        fixed_bg.update(saved[1])

    cur = model
    ll, mu, lam = estep(cur)
    trace = [ll]
    history = [cur]
    converged = False
    it = 0
    while it < max_iter:
        new = mstep(cur, mu, lam)
        it += 1
        saved = snapshot()
        ll_new, mu_new, lam_new = estep(new)
        if ll_new < ll - 1e-8 * max(1.0, abs(ll)):
            # cannot happen for an exact GEM step; keep the previous point
            warnings.warn("log-likelihood decreased; stopping at previous iterate")
            restore()
            break
        trace.append(ll_new)
        done = change(cur, new) < tol and abs(ll_new - ll) < ll_tol
        cur, ll, mu, lam = new, ll_new, mu_new, lam_new
        if done:
            converged = True
            break
        history = (history + [cur])[-3:]
        if not accelerate or len(history) < 3:
            continue
        path = _extrapolation_path(names, *(h.params() for h in history))
        history = [cur]
        saved = snapshot()
        for th in path:
            try:
                jump = cur.with_params(th)
                if step is not None and hasattr(step, "clip"):
                    jump = IntensityModel(jump.background, step.clip(jump.triggering), max_lag)
                ll_j, mu_j, lam_j = estep(jump)
            except (ValueError, ZeroDivisionError, OverflowError, FloatingPointError):
                continue
            if ll_j > ll:
                trace.append(ll_j)
                cur, ll, mu, lam = jump, ll_j, mu_j, lam_j
                history = [cur]
                break
        else:
            # every trial rejected: cur stays, with its E-step cache
            restore()

    bg, fam = cur.background, cur.triggering
    at_bound = step.flag_bounds(fam) if step is not None else []
    if isinstance(bg, Constant) and bg.nu <= 0:
        at_bound.append("nu")
    empty = step.empty_cells(fam) if isinstance(step, _HistStep) else []
    msg = "converged" if converged else f"stopped after {it} iterations without convergence"
    return FitResult(cur, trace, it, converged, branching_probabilities(cur, catalog),
                     method, at_bound, msg, _free_count(bg, fam, marked), empty)




# --------------------------------------------------------------------------
# Semiparametric background (iterative weighted KDE)
# --------------------------------------------------------------------------


def edge_corrected_kde(xy, weights, bandwidth, region, time_norm: float) -> WeightedKde:
    """Weighted KDE whose kernels each carry unit mass inside ``region``.

    Without this the kernels of events near the boundary leak mass outside
    the window, so the background integral falls short of sum(weights) / T
    and repeated re-weighting drains background mass into triggering.
    """
    w = np.asarray(weights, float)
    mass = WeightedKde(xy, np.ones(w.size), bandwidth, 1.0).component_mass(region)
    return WeightedKde(xy, w / np.maximum(mass, MIN_KERNEL_MASS), bandwidth, time_norm)


def adaptive_bandwidths(x, y, n_p: int = 25, eps_loc: float = 1e-6) -> np.ndarray:
    """Radius of the smallest disk around each event holding n_p other events."""
    if not 10 <= n_p <= 100:
        raise ValueError(f"n_p must lie in [10, 100], got {n_p}")
    pts = np.column_stack([x, y])
    if pts.shape[0] <= n_p:
        raise ValueError(f"need more than n_p = {n_p} events, got {pts.shape[0]}")
    dist, _ = cKDTree(pts).query(pts, k=n_p + 1)
    return np.maximum(dist[:, -1], eps_loc)


def _eval_grid(region, n=50):
    x0, x1, y0, y1 = region.bounds
    gx, gy = np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n))
    keep = region.contains(gx, gy)
    return gx[keep], gy[keep]


@dataclass
class SemiparametricResult:
    fit: FitResult
    background: WeightedKde
    bandwidths: np.ndarray
    outer_iterations: int
    converged: bool
    mu_changes: list[float]


def semiparametric_fit(family, catalog: EventCatalog, domain: ObservationDomain, *,
                       n_p: int = 25, eps_loc: float = 1e-6, tol: float = 1e-3,
                       max_outer: int = 30, init: str = "unit", em_kwargs=None) -> SemiparametricResult:
    """Alternate triggering fits with a re-weighted adaptive-bandwidth KDE.

    Starts from mu = 1 (``init="unit"``) or mu = n / (|X| T)
    (``init="data"``).  Each pass fits the triggering parameters with the
    background held fixed, then rebuilds mu(s) = (1/T) sum_i Pr(u_i = 0)
    k_i(s - s_i).  Stops when the largest change of mu over a 50 x 50
    grid is at most ``tol`` times its maximum.
    """
    bw = adaptive_bandwidths(catalog.x, catalog.y, n_p, eps_loc)
    if init == "unit":
        mu = Constant(1.0)
    elif init == "data":
        mu = Constant(catalog.n / (domain.area * domain.t_end))
    else:
        raise ValueError("init must be 'unit' or 'data'")
    gx, gy = _eval_grid(domain.region)
    prev = mu.value(gx, gy)
    kw = dict(em_kwargs or {})
    changes = []
    converged = False
    fit = None
    for outer in range(1, max_outer + 1):
        fit = em_fit(family, mu, catalog, domain, fit_background=False, **kw)
        family = fit.model.triggering
        mu = edge_corrected_kde(catalog.xy, fit.branching.p_background, bw, domain.region,
                                domain.t_end)
        cur = mu.value(gx, gy)
        change = float(np.max(np.abs(cur - prev)))
        changes.append(change)
        prev = cur
        if change <= tol * float(np.max(np.abs(cur))):
            converged = True
            break
    if not converged:
        warnings.warn(f"background iteration did not settle in {max_outer} passes")
    final = em_fit(family, mu, catalog, domain, fit_background=False, fit_triggering=False,
                   max_iter=0, **{k: v for k, v in kw.items() if k not in ("max_iter",)})
    final.n_free = fit.n_free
    final.converged = converged
    final.iterations = fit.iterations
    return SemiparametricResult(final, mu, bw, outer, converged, changes)


# --------------------------------------------------------------------------
# Forward likelihood-based predictive bandwidth selection
# --------------------------------------------------------------------------


def flp_increments(model: IntensityModel, catalog: EventCatalog, domain: ObservationDomain,
                   k1: int | None = None) -> np.ndarray:
    """delta_{k,k+1} = log lambda(s_{k+1}, t_{k+1}) - integral over (t_k, t_{k+1}].

    Increments are returned for k = k1, ..., n - 1 (1-based), k1 = floor(n/2).
    """
    n = catalog.n
    k1 = n // 2 if k1 is None else k1
    idx = np.arange(max(k1, 1), n)  # 0-based index of the predicted event
    lam = model.intensity_at_events(catalog)[idx]
    _check_positive(lam)
    t = catalog.t
    comp = model.background.integral(domain.region) * (t[idx] - t[idx - 1])
    if model.triggering is not None:
        comp = comp + _trigger_interval_mass(model, catalog, domain, idx)
    return np.log(lam) - comp


def _trigger_interval_mass(model, catalog, domain, idx):
    """Triggering mass inside X over (t_{i-1}, t_i] for each i in ``idx``."""
    fam = model.triggering
    t = catalog.t
    L = model.max_lag
    if isinstance(fam, Histogram):
        area = fam.annulus_measure_in(catalog.x, catalog.y, domain.region)
        rate = area @ fam.cell_values.T  # (n, time bins)
    else:
        rate = (fam.base_mass() * fam.kmul(catalog.mark, catalog.n)
                * fam.spatial_mass(catalog.x, catalog.y, domain.region))
    out = np.empty(idx.size)
    for pos, i in enumerate(idx):
        par = np.flatnonzero(t[:i] < t[i])
        lo = np.minimum(np.maximum(t[i - 1] - t[par], 0.0), L)
        hi = np.minimum(t[i] - t[par], L)
        if isinstance(fam, Histogram):
            ov = fam.lag_overlaps(lo, hi)
            out[pos] = float(np.sum(ov * rate[par]))
        else:
            out[pos] = float(np.dot(rate[par], fam.temporal_cdf(hi) - fam.temporal_cdf(lo)))
    return out


def silverman_bandwidth(x, y) -> float:
    n = len(x)
    sd = math.sqrt(0.5 * (np.var(x, ddof=1) + np.var(y, ddof=1)))
    return sd * n ** (-1.0 / 6.0)


def flp_score(h: float, weights, catalog: EventCatalog, domain: ObservationDomain,
              trig_at_events=None, trig_interval=None, k1: int | None = None) -> float:
    """FLP objective for a global KDE bandwidth h.

    The background used to predict event k+1 is the weighted KDE of the
    first k events (edge corrected) divided by t_k; the triggering part comes from the
    history as usual and is passed precomputed (it does not depend on h).
    """
    n = catalog.n
    k1 = n // 2 if k1 is None else k1
    idx = np.arange(max(k1, 1), n)
    w = np.asarray(weights, float)
    t = catalog.t
    comps = WeightedKde(catalog.xy, np.ones(n), h, 1.0).component_mass(domain.region)
    wc = w / np.maximum(comps, MIN_KERNEL_MASS)
    pref = core.prefix_kde(catalog.x, catalog.y, wc, float(h))[idx]
    span = np.maximum(t[idx - 1], 1e-300)
    mu = pref / (2 * np.pi * h * h * span)
    cum = np.concatenate([[0.0], np.cumsum(wc * comps)])
    bg_int = cum[idx] * (t[idx] - t[idx - 1]) / span
    tr = np.zeros(idx.size) if trig_at_events is None else trig_at_events[idx]
    ti = np.zeros(idx.size) if trig_interval is None else trig_interval
    lam = mu + tr
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(lam)) - np.sum(bg_int) - np.sum(ti))


@dataclass
class FlpResult:
    fit: FitResult
    bandwidth: float
    background: WeightedKde
    outer_iterations: int
    converged: bool
    score: float


def flp_fit(family, catalog: EventCatalog, domain: ObservationDomain, *,
            bandwidth_init: float | None = None, eps_loc: float = 1e-6, tol: float = 1e-3,
            max_outer: int = 20, em_kwargs=None) -> FlpResult:
    """Alternate ML triggering fits with FLP selection of the KDE bandwidth."""
    if catalog.n < 4:
        raise ValueError("FLP needs at least 4 events")
    h = silverman_bandwidth(catalog.x, catalog.y) if bandwidth_init is None else bandwidth_init
    h = max(h, eps_loc)
    x0, x1, y0, y1 = domain.region.bounds
    h_max = math.hypot(x1 - x0, y1 - y0)
    w = np.ones(catalog.n)
    kw = dict(em_kwargs or {})
    converged = False
    score = -np.inf
    for outer in range(1, max_outer + 1):
        mu = edge_corrected_kde(catalog.xy, w, h, domain.region, domain.t_end)
        fit = em_fit(family, mu, catalog, domain, fit_background=False, **kw)
        family = fit.model.triggering
        w = fit.branching.p_background
        k1 = catalog.n // 2
        idx = np.arange(max(k1, 1), catalog.n)
        tr = fit.model.trigger_at_events(catalog)
        ti = (_trigger_interval_mass(fit.model, catalog, domain, idx)
              if family is not None else None)
        obj = lambda lh: flp_score(math.exp(lh), w, catalog, domain, tr, ti)
        res = minimize_scalar(lambda lh: -obj(lh), bounds=(math.log(eps_loc), math.log(h_max)),
                              method="bounded", options={"xatol": 1e-6})
        h_new = max(math.exp(float(res.x)), eps_loc)
        score = -float(res.fun)
        if abs(h_new - h) <= tol * h:
            h = h_new
            converged = True
            break
        h = h_new
    mu = edge_corrected_kde(catalog.xy, w, h, domain.region, domain.t_end)
    final = em_fit(family, mu, catalog, domain, fit_background=False, fit_triggering=False,
                   max_iter=0, **{k: v for k, v in kw.items() if k != "max_iter"})
    final.n_free = fit.n_free
    final.converged = converged
    final.iterations = fit.iterations
    return FlpResult(final, h, mu, outer, converged, score)
