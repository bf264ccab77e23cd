"""Goodness of fit: residual thinning, super-thinning, Ripley's K, Voronoi residuals
and information criteria."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import shapely
from shapely import affinity
from scipy import stats
from scipy.spatial import cKDTree

from .catalog import EventCatalog, ObservationDomain, Polygon, Rectangle
from .intensity import IntensityModel, _uniform_in_region
from .simulate import _rng

# stream labels for the random draws of each procedure
_THIN, _SUPER, _ENVELOPE = 11, 12, 13


# --------------------------------------------------------------------------
# Bounds of the conditional intensity
# --------------------------------------------------------------------------


def intensity_bounds(model: IntensityModel, catalog: EventCatalog, domain: ObservationDomain,
                     resolution: int = 200) -> tuple[float, float]:
    """Estimates of (inf, sup) of lambda over X x [0, T).

    The infimum is that of the background: at t = 0 there is no history,
    and triggering only adds to mu.  The supremum is searched over the
    instants just after each event, where the triggering peaks, on the
    event locations and on a local grid (``resolution`` points across the
    window, refined around the largest candidates), together with the
    supremum of the background.
    """
    region = domain.region
    b = float(model.background.inf(region, resolution))
    top = float(model.background.sup(region, resolution))
    if model.triggering is None or catalog.n == 0:
        return b, top
    eps = 1e-9 * max(domain.t_end, 1.0)
    t_after = np.nextafter(catalog.t + eps, np.inf)
    at_events = model.evaluate(catalog, catalog.x, catalog.y, t_after)
    top = max(top, float(at_events.max()))
    # local refinement around the strongest peaks
    x0, x1, y0, y1 = region.bounds
    h = max(x1 - x0, y1 - y0) / resolution
    off = np.linspace(-5 * h, 5 * h, 11)
    gx, gy = (g.ravel() for g in np.meshgrid(off, off))
    for i in np.argsort(at_events)[::-1][:10]:
        px, py = catalog.x[i] + gx, catalog.y[i] + gy
        ok = region.contains(px, py)
        if ok.any():
            vals = model.evaluate(catalog, px[ok], py[ok], np.full(int(ok.sum()), t_after[i]))
            top = max(top, float(vals.max()))
    return b, top


# --------------------------------------------------------------------------
# Thinned and super-thinned residuals
# --------------------------------------------------------------------------


@dataclass
class ResidualProcess:
    """Residual points; homogeneous Poisson at ``target_rate`` under a correct model.

    ``source`` holds the index of the retained catalog event, or -1 for a
    simulated (superposed) point.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    source: np.ndarray
    target_rate: float
    kind: str
    seed: int
    retention: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def n(self) -> int:
        return int(self.t.size)

    @property
    def superposed(self) -> np.ndarray:
        return self.source < 0

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "y", "origin", "event_index"])
            for t, x, y, s in zip(self.t, self.x, self.y, self.source):
                w.writerow([f"{t:.12g}", f"{x:.12g}", f"{y:.12g}",
                            "simulated" if s < 0 else "observed", int(s)])


def thin_residuals(model: IntensityModel, catalog: EventCatalog, domain: ObservationDomain,
                   seed: int = 0, *, b: float | None = None, resolution: int = 200) -> ResidualProcess:
    """Keep event i with probability b / lambda(s_i, t_i), b = inf lambda."""
    if b is None:
        b, _ = intensity_bounds(model, catalog, domain, resolution)
    lam = model.intensity_at_events(catalog)
    if not b > 1e-12 * max(float(np.mean(lam)) if lam.size else 1.0, 1e-300):
        warnings.warn("inf of the intensity is essentially zero; the thinned process "
                      "will hold very few events and tests on it are uninformative")
    p = np.clip(b / lam, 0.0, 1.0) if lam.size else lam
    keep = _rng(seed, _THIN).random(catalog.n) < p
    idx = np.flatnonzero(keep)
    return ResidualProcess(catalog.t[idx], catalog.x[idx], catalog.y[idx], idx, float(b),
                           "thinned", seed, p)


def super_thin(model: IntensityModel, catalog: EventCatalog, domain: ObservationDomain,
               k: float | None = None, seed: int = 0, *, resolution: int = 200) -> ResidualProcess:
    """Thin to rate k where lambda > k and superpose Poisson points where lambda < k.

    Events are kept with probability min(k / lambda, 1); candidate points
    of a homogeneous process at rate k are kept with probability
    max(k - lambda, 0) / k.  ``k`` defaults to the mean rate n / (|X| T)
    and must lie in [inf lambda, sup lambda].
    """
    if k is None:
        k = catalog.n / domain.volume
    b, top = intensity_bounds(model, catalog, domain, resolution)
    tol = 1e-9 * max(abs(top), 1.0)
    if not (b - tol <= k <= top + tol):
        raise ValueError(f"k = {k:.6g} outside [inf, sup] of the intensity = [{b:.6g}, {top:.6g}]")
    lam = model.intensity_at_events(catalog)
    p = np.minimum(k / lam, 1.0)
    rng_keep, rng_cand = (np.random.default_rng(s) for s in
                          np.random.SeedSequence(seed, spawn_key=(_SUPER,)).spawn(2))
    keep = rng_keep.random(catalog.n) < p
    m = rng_cand.poisson(k * domain.volume)
    cx, cy = _uniform_in_region(rng_cand, domain.region, m)
    ct = rng_cand.uniform(0.0, domain.t_end, m)
    lam_c = model.evaluate(catalog, cx, cy, ct) if m else np.empty(0)
    add = rng_cand.random(m) < np.maximum(k - lam_c, 0.0) / k
    idx = np.flatnonzero(keep)
    t = np.concatenate([catalog.t[idx], ct[add]])
    x = np.concatenate([catalog.x[idx], cx[add]])
    y = np.concatenate([catalog.y[idx], cy[add]])
    src = np.concatenate([idx, np.full(int(add.sum()), -1)])
    order = np.lexsort((y, x, t))
    return ResidualProcess(t[order], x[order], y[order], src[order], float(k),
                           "superthinned", seed, p)


# --------------------------------------------------------------------------
# Ripley's K
# --------------------------------------------------------------------------


def _region_of(domain):
    return domain.region if isinstance(domain, ObservationDomain) else domain


def _overlap_areas(region, dx, dy) -> np.ndarray:
    """|X intersected with X shifted by (dx, dy)| for the translation correction."""
    if isinstance(region, Rectangle):
        x0, x1, y0, y1 = region.bounds
        return np.clip(x1 - x0 - np.abs(dx), 0, None) * np.clip(y1 - y0 - np.abs(dy), 0, None)
    poly = shapely.Polygon(region.vertices)
    moved = [affinity.translate(poly, a, b) for a, b in zip(dx, dy)]
    return shapely.area(shapely.intersection(poly, np.array(moved, dtype=object)))


def k_function(points, domain, radii, correction: str = "none") -> np.ndarray:
    """Ripley's K: |X| / (n (n - 1)) times the number of ordered pairs within r.

    No edge correction by default; ``correction="translation"`` weights each
    pair by |X| / |X intersected with X + (s_i - s_j)|.
    """
    pts = np.asarray(points, float).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        raise ValueError("K-function needs at least two points")
    region = _region_of(domain)
    radii = np.asarray(radii, float)
    x0, x1, y0, y1 = region.bounds
    if np.any(radii > math.hypot(x1 - x0, y1 - y0)):
        warnings.warn("radii exceed the window diameter")
    area = region.area()
    rmax = float(radii.max()) if radii.size else 0.0
    tree = cKDTree(pts)
    if correction == "none":
        counts = tree.count_neighbors(tree, radii) - n  # drop self pairs
        return area * counts / (n * (n - 1.0))
    if correction != "translation":
        raise ValueError(f"unknown edge correction {correction!r}")
    pairs = tree.query_pairs(rmax, output_type="ndarray")
    if pairs.size == 0:
        return np.zeros(radii.size)
    d = pts[pairs[:, 0]] - pts[pairs[:, 1]]
    dist = np.hypot(d[:, 0], d[:, 1])
    w = area / np.maximum(_overlap_areas(region, d[:, 0], d[:, 1]), 1e-300)
    order = np.argsort(dist)
    cum = np.concatenate([[0.0], np.cumsum(w[order])])
    counts = 2.0 * cum[np.searchsorted(dist[order], radii, side="right")]
    return area * counts / (n * (n - 1.0))


@dataclass
class KFunctionResult:
    radii: np.ndarray
    khat: np.ndarray
    env_lo: np.ndarray
    env_hi: np.ndarray
    n: int
    nsim: int
    correction: str = "none"

    @property
    def above(self) -> np.ndarray:
        return self.khat > self.env_hi

    @property
    def below(self) -> np.ndarray:
        return self.khat < self.env_lo

    @property
    def inside(self) -> bool:
        """True when K-hat stays within the envelope at every radius."""
        return not (self.above.any() or self.below.any())

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r", "khat", "env_lo", "env_hi"])
            for row in zip(self.radii, self.khat, self.env_lo, self.env_hi):
                w.writerow([f"{v:.12g}" for v in row])


def k_envelope(points, domain, radii, nsim: int = 999, seed: int = 0,
               correction: str = "none") -> KFunctionResult:
    """K-hat with a pointwise min/max envelope from ``nsim`` binomial patterns.

    The simulated patterns hold the same number of points, placed
    uniformly in the window, and use the same estimator.
    """
    pts = np.asarray(points, float).reshape(-1, 2)
    region = _region_of(domain)
    radii = np.asarray(radii, float)
    khat = k_function(pts, region, radii, correction)
    rng = _rng(seed, _ENVELOPE)
    lo = np.full(radii.size, np.inf)
    hi = np.full(radii.size, -np.inf)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(nsim):
            x, y = _uniform_in_region(rng, region, len(pts))
            k = k_function(np.column_stack([x, y]), region, radii, correction)
            np.minimum(lo, k, out=lo)
            np.maximum(hi, k, out=hi)
    return KFunctionResult(radii, khat, lo, hi, len(pts), nsim, correction)


# --------------------------------------------------------------------------
# Voronoi residuals
# --------------------------------------------------------------------------


@dataclass
class VoronoiResidualMap:
    """Voronoi cells of the events clipped to X with observed-minus-expected counts.

    ``raw`` is 1 minus the integral of lambda over the cell and time
    window.  ``standardized`` is (1 - Lambda) / sqrt(Lambda), a Pearson
    style scaling under a Poisson approximation; it is a convenience
    transform and not an exact reference distribution.
    """

    event_index: np.ndarray
    cells: list[np.ndarray]
    area: np.ndarray
    integral: np.ndarray
    raw: np.ndarray
    standardized: np.ndarray
    window: tuple[float, float]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["event_index", "area", "integral", "raw", "standardized"])
            for row in zip(self.event_index, self.area, self.integral, self.raw, self.standardized):
                w.writerow([int(row[0]), *(f"{v:.12g}" for v in row[1:])])

    def write_svg(self, path: str | Path, region=None, values: str = "standardized") -> None:
        from .plots import voronoi_svg
        Path(path).write_text(voronoi_svg(self, region, values))


def voronoi_cells(x, y, region) -> list[np.ndarray]:
    """Voronoi cell of each point, clipped to the region, as vertex rings."""
    pts = np.column_stack([x, y])
    n = len(pts)
    if n < 3:
        raise ValueError("Voronoi residuals need at least 3 events")
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise ValueError("events are collinear; the Voronoi tessellation is degenerate")
    if len(np.unique(pts, axis=0)) < n:
        raise ValueError("coincident event locations; Voronoi cells are not defined")
    window = shapely.Polygon(region.vertices)
    x0, x1, y0, y1 = region.bounds
    pad = 10 * max(x1 - x0, y1 - y0)
    frame = shapely.box(x0 - pad, y0 - pad, x1 + pad, y1 + pad)
    diagram = shapely.voronoi_polygons(shapely.MultiPoint(pts), extend_to=frame, ordered=True)
    out = []
    for cell in shapely.get_parts(diagram):
        clipped = shapely.intersection(cell, window)
        if clipped.geom_type != "Polygon":
            # the window is not convex: keep the piece holding the generator
            parts = [g for g in shapely.get_parts(clipped) if g.geom_type == "Polygon"]
            clipped = max(parts, key=lambda g: g.area)
        out.append(np.asarray(clipped.exterior.coords)[:-1])
    return out


def voronoi_residuals(model: IntensityModel, catalog: EventCatalog, domain: ObservationDomain,
                      window: tuple[float, float] | None = None, *, panels: int = 8,
                      tail: float = 1e-10) -> VoronoiResidualMap:
    """Observed (one) minus the integral of lambda over each event's Voronoi cell.

    The tessellation uses the events with times in ``window`` (default the
    whole observation period) and the intensity is integrated over each
    cell times that window: the background exactly, the triggering of
    every earlier event by polar quadrature.  Parents whose kernel puts
    less than ``tail`` of its mass beyond their distance to a cell are
    skipped for that cell.
    """
    t0, t1 = (0.0, domain.t_end) if window is None else map(float, window)
    if not 0.0 <= t0 < t1 <= domain.t_end:
        raise ValueError("time window must lie inside [0, T)")
    sel = np.flatnonzero((catalog.t >= t0) & (catalog.t < t1))
    cells = voronoi_cells(catalog.x[sel], catalog.y[sel], domain.region)
    polys = [Polygon(c) for c in cells]
    area = np.array([p.area() for p in polys])
    bg = model.background
    integral = np.array([bg.integral(p) for p in polys]) * (t1 - t0)
    fam = model.triggering
    if fam is not None:
        par = np.flatnonzero(catalog.t < t1)
        reach = fam.tail_radius(tail)
        lag_lo = np.maximum(t0 - catalog.t[par], 0.0)
        lag_hi = t1 - catalog.t[par]
        marks = None if catalog.mark is None else catalog.mark[par]
        points = shapely.points(catalog.x[par], catalog.y[par])
        for c, poly in enumerate(polys):
            near = np.ones(par.size, bool)
            if math.isfinite(reach):
                near = shapely.distance(shapely.Polygon(poly.vertices), points) < reach
            idx = np.flatnonzero(near)
            if idx.size == 0:
                continue
            m = fam.window_mass(catalog.x[par[idx]], catalog.y[par[idx]],
                                None if marks is None else marks[idx], lag_lo[idx], lag_hi[idx],
                                poly, model.max_lag, panels)
            integral[c] += float(np.sum(m))
    raw = 1.0 - integral
    with np.errstate(divide="ignore", invalid="ignore"):
        std = np.where(integral > 0, raw / np.sqrt(integral), np.nan)
    return VoronoiResidualMap(sel, cells, area, integral, raw, std, (t0, t1))


def sign_test(values, alternative: str = "two-sided") -> float:
    """Binomial sign test of P(value > 0) = 1/2; zeros are dropped."""
    v = np.asarray(values, float)
    v = v[np.isfinite(v) & (v != 0)]
    if v.size == 0:
        return 1.0
    return float(stats.binomtest(int(np.sum(v > 0)), v.size, 0.5, alternative=alternative).pvalue)


def quadrat_test(points, domain, shape: tuple[int, int] = (5, 5)) -> tuple[float, float]:
    """Chi-squared test of homogeneity on quadrat counts; returns (statistic, p-value).

    Expected counts are proportional to the area of each quadrat inside
    the window.
    """
    pts = np.asarray(points, float).reshape(-1, 2)
    region = _region_of(domain)
    x0, x1, y0, y1 = region.bounds
    xe = np.linspace(x0, x1, shape[0] + 1)
    ye = np.linspace(y0, y1, shape[1] + 1)
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=[xe, ye])
    if isinstance(region, Rectangle):
        areas = np.full(shape, (x1 - x0) * (y1 - y0) / (shape[0] * shape[1]))
    else:
        window = shapely.Polygon(region.vertices)
        boxes = [shapely.box(xe[i], ye[j], xe[i + 1], ye[j + 1])
                 for i in range(shape[0]) for j in range(shape[1])]
        areas = shapely.area(shapely.intersection(np.array(boxes, dtype=object), window))
        areas = np.asarray(areas).reshape(shape)
    ok = areas > 0
    expected = areas[ok] / areas[ok].sum() * counts[ok].sum()
    res = stats.chisquare(counts[ok], expected)
    return float(res.statistic), float(res.pvalue)


# --------------------------------------------------------------------------
# Information criteria
# --------------------------------------------------------------------------


def information_criteria(loglik: float, n_params: int, n_events: int) -> dict[str, float]:
    """AIC, BIC and Hannan-Quinn (the latter omitted when n < 3)."""
    if not math.isfinite(loglik):
        raise ValueError("log-likelihood must be finite")
    k = n_params
    out = {"AIC": 2 * k - 2 * loglik}
    if n_events >= 1:
        out["BIC"] = k * math.log(n_events) - 2 * loglik
    if n_events >= 3:
        out["HQ"] = 2 * k * math.log(math.log(n_events)) - 2 * loglik
    return out


@dataclass
class SelectionTable:
    names: list[str]
    loglik: np.ndarray
    n_params: np.ndarray
    scores: dict[str, np.ndarray]
    criterion: str = "AIC"

    @property
    def best(self) -> str:
        return self.names[int(np.argmin(self.scores[self.criterion]))]

    def best_by(self, criterion: str) -> str:
        return self.names[int(np.argmin(self.scores[criterion]))]

    def write_csv(self, path: str | Path) -> None:
        crits = list(self.scores)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "loglik", "n_params", *crits,
                        *(f"best_{c.lower()}" for c in crits)])
            for i, name in enumerate(self.names):
                w.writerow([name, f"{self.loglik[i]:.12g}", int(self.n_params[i]),
                            *(f"{self.scores[c][i]:.12g}" for c in crits),
                            *(int(self.best_by(c) == name) for c in crits)])


def select_model(fits: Mapping[str, tuple[float, int]], n_events: int,
                 criterion: str = "AIC") -> SelectionTable:
    """Score candidate fits given as name -> (loglik, n_params)."""
    names = list(fits)
    ll = np.array([fits[k][0] for k in names], float)
    kk = np.array([fits[k][1] for k in names], int)
    rows = [information_criteria(a, b, n_events) for a, b in zip(ll, kk)]
    scores = {c: np.array([r[c] for r in rows]) for c in rows[0]}
    if criterion not in scores:
        raise ValueError(f"criterion {criterion!r} unavailable for n = {n_events}")
    return SelectionTable(names, ll, kk, scores, criterion)
