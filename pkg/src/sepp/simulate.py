"""Simulation of self-exciting processes.

Both simulators work on a padded window, the "universe": the bounding box
of X grown by ``pad_space`` in space and [-pad_time, T) in time (with both
pads zero the universe is X x [0, T) itself).  Events that would fall
outside the universe are discarded and have no offspring, so the two
methods simulate the same process; the returned catalog is the part inside
X x [0, T).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import EventCatalog, ObservationDomain, Rectangle
from .intensity import EtasPowerLaw, IntensityModel

_BACKGROUND_STREAM = 0
_GENERATION_STREAM = 1
_MARK_STREAM = 2
_OGATA_STREAM = 3


class SupercriticalError(ValueError):
    """Mean offspring number m >= 1: the process explodes."""


class SimulationError(RuntimeError):
    """A simulation safety cap was hit."""


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    pad_time: float | None = None
    pad_space: float | None = None
    method: str = "cluster"
    mark_beta: float | None = None
    max_generations: int = 100_000
    max_events: int = 20_000_000

    def __post_init__(self):
        for name in ("pad_time", "pad_space"):
            v = getattr(self, name)
            if v is not None and not (v >= 0):
                raise ValueError(f"{name} must be >= 0, got {v}")
        if self.method not in ("cluster", "ogata"):
            raise ValueError(f"method must be 'cluster' or 'ogata', got {self.method!r}")
        if self.mark_beta is not None and not self.mark_beta > 0:
            raise ValueError("mark_beta must be positive")

    def pads(self, model: IntensityModel) -> tuple[float, float]:
        dt, ds = (0.0, 0.0) if model.triggering is None else model.triggering.default_pads()
        if np.isfinite(model.max_lag):
            dt = min(dt, float(model.max_lag))
        return (dt if self.pad_time is None else self.pad_time,
                ds if self.pad_space is None else self.pad_space)


@dataclass
class SimResult:
    """Simulated catalog plus the branching provenance of every raw event.

    ``raw_*`` arrays cover all events generated in the universe, sorted by
    time; ``raw_parent`` is the raw index of the parent or -1 for
    background.  ``kept`` maps catalog rows to raw rows and ``parent``
    gives catalog-level parents: -1 background, -2 parent outside the
    observed window.
    """

    catalog: EventCatalog
    parent: np.ndarray
    generation: np.ndarray
    raw_t: np.ndarray
    raw_x: np.ndarray
    raw_y: np.ndarray
    raw_mark: np.ndarray | None
    raw_parent: np.ndarray
    raw_generation: np.ndarray
    kept: np.ndarray

    @property
    def raw_count(self) -> int:
        return self.raw_t.size

    @property
    def n_background(self) -> int:
        return int(np.sum(self.parent == -1))


def universe(domain: ObservationDomain, pad_space: float):
    if pad_space > 0:
        return domain.region.expanded(pad_space)
    return domain.region


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _marks(model, config, n, rng):
    if not isinstance(model.triggering, EtasPowerLaw) or config.mark_beta is None:
        return None
    return model.triggering.M0 + rng.exponential(1.0 / config.mark_beta, n)


def expected_offspring(model: IntensityModel, config: SimConfig) -> float:
    """Mean offspring number, averaged over the mark law when marks are simulated."""
    fam = model.triggering
    if fam is None:
        return 0.0
    m = fam.mass(None, model.max_lag)
    if isinstance(fam, EtasPowerLaw) and config.mark_beta is not None:
        if fam.alpha >= config.mark_beta:
            return np.inf
        m *= config.mark_beta / (config.mark_beta - fam.alpha)
    return float(m)


def _guard(model, config):
    m = expected_offspring(model, config)
    if not m < 1.0:
        raise SupercriticalError(f"mean offspring number {m:.6g} >= 1; refusing to simulate")
    return m


def simulate_poisson_background(background, domain: ObservationDomain, seed: int = 0,
                                pad_time: float = 0.0, pad_space: float = 0.0):
    """Background events (t, x, y) over the padded window, sorted by time."""
    region = universe(domain, pad_space)
    t, x, y = background.sample(_rng(seed, _BACKGROUND_STREAM), region, -pad_time, domain.t_end)
    order = np.lexsort((y, x, t))
    return t[order], x[order], y[order]


def _finish(model, domain, region, t, x, y, mark, parent, gen):
    order = np.lexsort((np.arange(t.size), y, x, t))
    rank = np.empty(t.size, dtype=np.int64)
    rank[order] = np.arange(t.size)
    t, x, y = t[order], x[order], y[order]
    mark = None if mark is None else mark[order]
    parent = parent[order]
    parent = np.where(parent >= 0, rank[np.maximum(parent, 0)], -1)
    gen = gen[order]
    keep = (t >= 0) & (t < domain.t_end) & domain.region.contains(x, y)
    kept = np.flatnonzero(keep)
    cat_index = np.full(t.size, -2, dtype=np.int64)
    cat_index[kept] = np.arange(kept.size)
    cparent = np.where(parent[kept] >= 0, cat_index[np.maximum(parent[kept], 0)], -1)
    catalog = EventCatalog(t[kept], x[kept], y[kept], None if mark is None else mark[kept])
    return SimResult(catalog, cparent, gen[kept], t, x, y, mark, parent, gen, kept)


def simulate_cluster(model: IntensityModel, domain: ObservationDomain,
                     config: SimConfig = SimConfig()) -> SimResult:
    """Branching simulation: background immigrants, then Poisson(m_i) offspring per event."""
    _guard(model, config)
    pad_t, pad_s = config.pads(model)
    region = universe(domain, pad_s)
    T = domain.t_end
    bt, bx, by = model.background.sample(_rng(config.seed, _BACKGROUND_STREAM), region, -pad_t, T)
    marks_rng = _rng(config.seed, _MARK_STREAM)
    bm = _marks(model, config, bt.size, marks_rng)
    ts, xs, ys, ms, ps, gs = [bt], [bx], [by], [bm], [np.full(bt.size, -1)], [np.zeros(bt.size, np.int64)]
    fam = model.triggering
    cur_t, cur_x, cur_y, cur_m = bt, bx, by, bm
    cur_idx = np.arange(bt.size)
    total = bt.size
    g = 0
    base = 0.0 if fam is None else fam.mass(None, model.max_lag)
    while fam is not None and cur_t.size and base > 0:
        g += 1
        if g > config.max_generations:
            raise SimulationError("generation cap reached")
        rng = _rng(config.seed, _GENERATION_STREAM, g)
        km = fam.kmul(cur_m, cur_t.size)
        counts = rng.poisson(base * km)
        par = np.repeat(np.arange(cur_t.size), counts)
        dt, dx, dy = fam.sample_offsets(rng, par.size, model.max_lag)
        ct, cx, cy = cur_t[par] + dt, cur_x[par] + dx, cur_y[par] + dy
        ok = (ct < T) & region.contains(cx, cy)
        par = par[ok]
        ct, cx, cy = ct[ok], cx[ok], cy[ok]
        cm = _marks(model, config, ct.size, marks_rng)
        idx = total + np.arange(ct.size)
        total += ct.size
        if total > config.max_events:
            raise SimulationError("event cap reached")
        ts.append(ct); xs.append(cx); ys.append(cy); ms.append(cm)
        ps.append(cur_idx[par]); gs.append(np.full(ct.size, g, np.int64))
        cur_t, cur_x, cur_y, cur_m, cur_idx = ct, cx, cy, cm, idx
    mark = None if bm is None else np.concatenate(ms)
    return _finish(model, domain, region, np.concatenate(ts), np.concatenate(xs),
                   np.concatenate(ys), mark, np.concatenate(ps), np.concatenate(gs))


def simulate_ogata(model: IntensityModel, domain: ObservationDomain,
                   config: SimConfig = SimConfig(), max_proposals: int = 50_000_000) -> SimResult:
    """Sequential thinning on the space-integrated intensity.

    The time-marginal rate is nu_0 + sum_j nu_j(t), with nu_0 the
    background integral over the universe and nu_j(t) the full-plane
    triggering rate of event j.  Proposals come from an upper bound that is
    refreshed after every proposal; an accepted time picks a source with
    probability proportional to its rate and a location from that source,
    and locations outside the universe are rejected.
    """
    _guard(model, config)
    pad_t, pad_s = config.pads(model)
    region = universe(domain, pad_s)
    rng = _rng(config.seed, _OGATA_STREAM)
    marks_rng = _rng(config.seed, _MARK_STREAM)
    T = domain.t_end
    fam = model.triggering
    L = model.max_lag
    nu0 = model.background.integral(region)
    cap = 1024
    et = np.empty(cap); ex = np.empty(cap); ey = np.empty(cap); ek = np.empty(cap)
    em = np.empty(cap) if (isinstance(fam, EtasPowerLaw) and config.mark_beta is not None) else None
    epar = np.empty(cap, np.int64); egen = np.empty(cap, np.int64)
    n = 0
    tau = -pad_t
    for _ in range(max_proposals):
        if fam is None or n == 0:
            bound = nu0
        else:
            bound = nu0 + float(np.dot(ek[:n], fam.time_rate_sup(tau - et[:n], L)))
        if bound <= 0:
            break
        tau += rng.exponential(1.0 / bound)
        if tau >= T:
            break
        if fam is None or n == 0:
            rates = None
            lam = nu0
        else:
            rates = ek[:n] * fam.time_rate(tau - et[:n], L)
            lam = nu0 + float(rates.sum())
        if rng.random() * bound > lam:
            continue
        pick = rng.random() * lam
        if pick < nu0 or rates is None:
            x, y = model.background.sample_location(rng, region)
            parent = -1
        else:
            cum = np.cumsum(rates)
            parent = int(min(np.searchsorted(cum, pick - nu0, side="right"), n - 1))
            dx, dy = fam.sample_displacements(rng, 1, np.array([tau - et[parent]]))
            x, y = ex[parent] + dx[0], ey[parent] + dy[0]
            if not region.contains(x, y):
                continue
        if n == cap:
            cap *= 2
            et, ex, ey, ek, epar, egen = (np.resize(a, cap) for a in (et, ex, ey, ek, epar, egen))
            if em is not None:
                em = np.resize(em, cap)
        et[n], ex[n], ey[n] = tau, x, y
        mk = _marks(model, config, 1, marks_rng)
        if em is not None:
            em[n] = mk[0]
        ek[n] = 1.0 if fam is None else fam.kmul(None if mk is None else mk, 1)[0]
        epar[n] = parent
        egen[n] = 0 if parent < 0 else egen[parent] + 1
        n += 1
        if n > config.max_events:
            raise SimulationError("event cap reached")
    else:
        raise SimulationError("thinning proposal cap reached")
    return _finish(model, domain, region, et[:n].copy(), ex[:n].copy(), ey[:n].copy(),
                   None if em is None else em[:n].copy(), epar[:n].copy(), egen[:n].copy())


def simulate(model: IntensityModel, domain: ObservationDomain,
             config: SimConfig = SimConfig()) -> SimResult:
    if config.method == "ogata":
        return simulate_ogata(model, domain, config)
    return simulate_cluster(model, domain, config)


def cluster_sizes(result: SimResult, t_max: float | None = None) -> np.ndarray:
    """Total size of each raw cluster, keyed by its background root.

    Roots after ``t_max`` are excluded, which limits truncation of
    clusters still growing at the end of the window.
    """
    parent = result.raw_parent
    root = np.arange(parent.size)
    # parents precede children in time order, so one forward pass resolves roots
    for i in range(parent.size):
        if parent[i] >= 0:
            root[i] = root[parent[i]]
    roots = np.flatnonzero(parent < 0)
    if t_max is not None:
        roots = roots[result.raw_t[roots] < t_max]
    sizes = np.bincount(root, minlength=parent.size)
    return sizes[roots]


def write_provenance(result: SimResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["event_index", "label", "parent", "generation"])
        for i, (p, g) in enumerate(zip(result.parent, result.generation)):
            w.writerow([i, "background" if p == -1 else "triggered", int(p), int(g)])
