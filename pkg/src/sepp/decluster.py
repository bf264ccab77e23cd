"""Stochastic declustering and model-independent histogram estimation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import EventCatalog, ObservationDomain
from .fit_em import BranchingMatrix, FitResult, em_fit
from .intensity import Constant, GridField, Histogram


@dataclass
class Declustering:
    """Per-event labels: True for background, False for triggered."""

    background: np.ndarray
    seed: int

    @property
    def retained(self) -> np.ndarray:
        return np.flatnonzero(self.background)

    def labels(self) -> list[str]:
        return ["background" if b else "triggered" for b in self.background]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["event_index", "label"])
            for i, lab in enumerate(self.labels()):
                w.writerow([i, lab])


@dataclass
class FamilyTree:
    """Parent index per event (-1 for background) and generation number."""

    parent: np.ndarray
    generation: np.ndarray
    seed: int

    def validate(self) -> None:
        idx = np.arange(self.parent.size)
        trig = self.parent >= 0
        assert np.all(self.parent[trig] < idx[trig]), "parent must precede child"
        assert np.all(self.generation[~trig] == 0)
        assert np.all(self.generation[trig] == self.generation[self.parent[trig]] + 1)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["event_index", "label", "parent", "generation"])
            for i, (p, g) in enumerate(zip(self.parent, self.generation)):
                w.writerow([i, "background" if p < 0 else "triggered", int(p), int(g)])


def thin_to_background(branching: BranchingMatrix, catalog: EventCatalog | None = None,
                       seed: int = 0) -> Declustering:
    """Keep each event independently with probability Pr(u_i = 0)."""
    rng = np.random.default_rng(seed)
    keep = rng.random(branching.n) < branching.p_background
    return Declustering(keep, seed)


def generations(parent: np.ndarray) -> np.ndarray:
    gen = np.zeros(parent.size, dtype=np.int64)
    for i in np.flatnonzero(parent >= 0):
        gen[i] = gen[parent[i]] + 1
    return gen


def sample_family_tree(branching: BranchingMatrix, catalog: EventCatalog | None = None,
                       seed: int = 0) -> FamilyTree:
    """Draw one branching structure, each event independently from its row.

    With R_i uniform on (0, 1) the event is background if R_i < Pr(u_i = 0);
    otherwise its parent is the smallest J whose cumulative probability
    Pr(u_i = 0) + sum_{j <= J} Pr(u_i = j) exceeds R_i.
    """
    n = branching.n
    rng = np.random.default_rng(seed)
    r = rng.random(n)
    parent = np.full(n, -1, dtype=np.int64)
    child = branching.child
    if child.size:
        starts = np.searchsorted(child, np.arange(n))
        ends = np.searchsorted(child, np.arange(n), side="right")
        csum = np.cumsum(branching.prob)
        before = np.where(starts > 0, csum[np.maximum(starts - 1, 0)], 0.0)
        # within-row cumulative probabilities, offset by the background term
        within = csum - np.repeat(before, ends - starts) + np.repeat(branching.p_background, ends - starts)
        need = r >= branching.p_background
        for i in np.flatnonzero(need & (ends > starts)):
            k = int(np.searchsorted(within[starts[i]:ends[i]], r[i], side="right"))
            # rounding can leave the row total a hair below R_i
            k = min(k, ends[i] - starts[i] - 1)
            parent[i] = branching.parent[starts[i] + k]
    tree = FamilyTree(parent, generations(parent), seed)
    tree.validate()
    return tree


def default_bins(catalog: EventCatalog, n_time: int = 10, n_radius: int = 8,
                 max_pairs: int = 200_000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Logarithmic bins spanning the 1st-99th percentiles of pairwise lags and distances."""
    n = catalog.n
    if n < 2:
        raise ValueError("need at least two events to choose bins")
    total = n * (n - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, max_pairs)
        j = rng.integers(0, n, max_pairs)
        keep = i != j
        i, j = i[keep], j[keep]
    lag = np.abs(catalog.t[i] - catalog.t[j])
    dist = np.hypot(catalog.x[i] - catalog.x[j], catalog.y[i] - catalog.y[j])
    lag, dist = lag[lag > 0], dist[dist > 0]

    def edges(v, k):
        lo, hi = np.percentile(v, [1, 99])
        return np.concatenate([[0.0], np.geomspace(lo, hi, k)])

    return edges(lag, n_time), edges(dist, n_radius)


@dataclass
class MisdResult:
    histogram: Histogram
    background: Constant | GridField
    branching: BranchingMatrix
    fit: FitResult
    support: tuple[float, float]

    @property
    def total_mass(self) -> float:
        return self.histogram.mass()


def misd_fit(catalog: EventCatalog, domain: ObservationDomain, time_edges=None,
             radius_edges=None, background: str | GridField = "constant", *,
             grid_shape: tuple[int, int] = (10, 10), tol: float = 1e-6, ll_tol: float = 1e-6,
             max_iter: int = 500, method: str = "cubature", init_mass: float = 0.5) -> MisdResult:
    """EM with a histogram triggering function on (lag bin x annulus) cells.

    Each M-step sets a cell value to the expected number of parent-child
    pairs in the cell divided by its exposure, the measure of that cell
    inside the observation window summed over parents (with
    ``method="schoenberg"`` the exposure is n times the cell measure).
    Triggering beyond the last edges is zero; the support is reported.
    """
    if time_edges is None or radius_edges is None:
        te, re = default_bins(catalog)
        time_edges = te if time_edges is None else time_edges
        radius_edges = re if radius_edges is None else radius_edges
    te = np.asarray(time_edges, float)
    re = np.asarray(radius_edges, float)
    measure = np.diff(te)[:, None] * (np.pi * np.diff(re ** 2))[None, :]
    hist = Histogram(te, re, np.full(measure.shape, init_mass / measure.sum()))
    rate = catalog.n * (1 - init_mass) / (domain.area * domain.t_end)
    if isinstance(background, GridField):
        bg = background
    elif background == "constant":
        bg = Constant(rate)
    elif background == "grid":
        x0, x1, y0, y1 = domain.region.bounds
        bg = GridField(np.linspace(x0, x1, grid_shape[0] + 1), np.linspace(y0, y1, grid_shape[1] + 1),
                       np.full(grid_shape, rate))
    else:
        raise ValueError(f"unknown background {background!r}")
    # extrapolation rarely pays off on many near-empty cells, so plain EM
    fit = em_fit(hist, bg, catalog, domain, tol=tol, ll_tol=ll_tol, max_iter=max_iter, method=method,
                 accelerate=False)
    return MisdResult(fit.model.triggering, fit.model.background, fit.branching, fit,
                      (float(te[-1]), float(re[-1])))
