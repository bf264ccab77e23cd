"""Event catalogs, observation domains and planar geometry helpers."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class CatalogError(ValueError):
    """Raised for malformed catalog files or events outside the domain."""


class DomainError(ValueError):
    """Raised for degenerate or invalid observation domains."""


# --------------------------------------------------------------------------
# Regions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Rectangle:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.x_max, self.y_min, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError("rectangle bounds must be finite")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise DomainError("degenerate rectangle: zero area")

    @property
    def vertices(self) -> np.ndarray:
        return np.array([
            [self.x_min, self.y_min],
            [self.x_max, self.y_min],
            [self.x_max, self.y_max],
            [self.x_min, self.y_max],
        ])

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return ((x >= self.x_min) & (x <= self.x_max)
                & (y >= self.y_min) & (y <= self.y_max))

    def expanded(self, margin: float) -> "Rectangle":
        return Rectangle(self.x_min - margin, self.x_max + margin,
                         self.y_min - margin, self.y_max + margin)


@dataclass(frozen=True, eq=False)
class Polygon:
    """Simple polygon given by its vertex ring (closing vertex optional)."""

    ring: np.ndarray

    def __post_init__(self):
        ring = np.asarray(self.ring, dtype=float).reshape(-1, 2)
        if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        if len(ring) < 3:
            raise DomainError("polygon needs at least 3 vertices")
        if not np.all(np.isfinite(ring)):
            raise DomainError("polygon vertices must be finite")
        if abs(shoelace_area(ring)) <= 0.0:
            raise DomainError("degenerate polygon: zero area")
        if _self_intersects(ring):
            raise DomainError("polygon ring is self-intersecting")
        # store counter-clockwise
        if shoelace_area(ring) < 0:
            ring = ring[::-1].copy()
        ring.setflags(write=False)
        object.__setattr__(self, "ring", ring)

    def __eq__(self, other):
        return isinstance(other, Polygon) and np.array_equal(self.ring, other.ring)

    def __hash__(self):
        return hash(self.ring.tobytes())

    @property
    def vertices(self) -> np.ndarray:
        return self.ring

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (float(self.ring[:, 0].min()), float(self.ring[:, 0].max()),
                float(self.ring[:, 1].min()), float(self.ring[:, 1].max()))

    def area(self) -> float:
        return abs(shoelace_area(self.ring))

    def contains(self, x, y) -> np.ndarray:
        return points_in_polygon(self.ring, x, y)

    def expanded(self, margin: float) -> Rectangle:
        x0, x1, y0, y1 = self.bounds
        return Rectangle(x0 - margin, x1 + margin, y0 - margin, y1 + margin)


Region = Rectangle | Polygon


def shoelace_area(ring: np.ndarray) -> float:
    """Signed area of a vertex ring (positive when counter-clockwise)."""
    x = ring[:, 0]
    y = ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p) -> bool:
    return (min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= p[1] <= max(a[1], b[1]))


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d1 = _orient(p3, p4, p1)
    d2 = _orient(p3, p4, p2)
    d3 = _orient(p1, p2, p3)
    d4 = _orient(p1, p2, p4)
    if ((d1 > 0) != (d2 > 0) and d1 != 0 and d2 != 0
            and (d3 > 0) != (d4 > 0) and d3 != 0 and d4 != 0):
        return True
    if d1 == 0 and _on_segment(p3, p4, p1):
        return True
    if d2 == 0 and _on_segment(p3, p4, p2):
        return True
    if d3 == 0 and _on_segment(p1, p2, p3):
        return True
    if d4 == 0 and _on_segment(p1, p2, p4):
        return True
    return False


def _self_intersects(ring: np.ndarray) -> bool:
    k = len(ring)
    for i in range(k):
        a, b = ring[i], ring[(i + 1) % k]
        for j in range(i + 1, k):
            # adjacent edges share a vertex by construction
            if j == i or (j + 1) % k == i or j == (i + 1) % k:
                continue
            c, d = ring[j], ring[(j + 1) % k]
            if _segments_intersect(a, b, c, d):
                return True
    return False


def points_in_polygon(ring: np.ndarray, x, y) -> np.ndarray:
    """Even-odd rule; points on the boundary count as inside."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shape = np.broadcast(x, y).shape
    px = np.broadcast_to(x, shape).ravel()
    py = np.broadcast_to(y, shape).ravel()
    inside = np.zeros(px.shape, dtype=bool)
    boundary = np.zeros(px.shape, dtype=bool)
    k = len(ring)
    for i in range(k):
        ax, ay = ring[i]
        bx, by = ring[(i + 1) % k]
        crosses = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xcross)
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        seg = ((np.abs(cross) <= 1e-12 * max(1.0, abs(bx - ax) + abs(by - ay)))
               & (px >= min(ax, bx)) & (px <= max(ax, bx))
               & (py >= min(ay, by)) & (py <= max(ay, by)))
        boundary |= seg
    return (inside | boundary).reshape(shape)


def triangulate(ring: np.ndarray) -> list[np.ndarray]:
    """Ear-clipping triangulation of a simple counter-clockwise ring."""
    idx = list(range(len(ring)))
    tris = []
    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 10 * len(ring) ** 2:
            raise DomainError("triangulation failed; ring is not simple")
        for k in range(len(idx)):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = ring[i0], ring[i1], ring[i2]
            if _orient(a, b, c) <= 0:
                continue
            ear = True
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                p = ring[j]
                if (_orient(a, b, p) >= 0 and _orient(b, c, p) >= 0
                        and _orient(c, a, p) >= 0):
                    ear = False
                    break
            if ear:
                tris.append(np.array([a, b, c]))
                del idx[k]
                break
    tris.append(ring[idx])
    return tris


# --------------------------------------------------------------------------
# Domain and catalog
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationDomain:
    """Spatial region plus the time window [0, t_end)."""

    region: Region
    t_end: float

    def __post_init__(self):
        if not (math.isfinite(self.t_end) and self.t_end > 0):
            raise DomainError("t_end must be positive and finite")

    @classmethod
    def unit_square(cls, t_end: float = 1.0) -> "ObservationDomain":
        return cls(Rectangle(0.0, 1.0, 0.0, 1.0), t_end)

    @property
    def area(self) -> float:
        return self.region.area()

    @property
    def volume(self) -> float:
        return self.region.area() * self.t_end

    def contains(self, t, x, y) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (t >= 0) & (t < self.t_end) & self.region.contains(x, y)


def domain_area(domain: ObservationDomain | Region) -> float:
    region = domain.region if isinstance(domain, ObservationDomain) else domain
    area = region.area()
    if not area > 0:
        raise DomainError("degenerate region: zero area")
    return area


def point_in_domain(s: Sequence[float], domain: ObservationDomain | Region) -> bool:
    region = domain.region if isinstance(domain, ObservationDomain) else domain
    return bool(region.contains(s[0], s[1]))


@dataclass(frozen=True)
class Event:
    t: float
    x: float
    y: float
    mark: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.t) and self.t >= 0):
            raise CatalogError(f"event time must be finite and >= 0, got {self.t}")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise CatalogError("event location must be finite")


@dataclass(frozen=True, eq=False)
class EventCatalog:
    """Events sorted by (t, x, y, input order), stored column-wise.

    ``mark`` is None for unmarked catalogs.  ``dropped`` counts rows that
    were discarded at load time under the non-strict policy.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    mark: np.ndarray | None = None
    dropped: int = 0
    order: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=float)
        x = np.ascontiguousarray(self.x, dtype=float)
        y = np.ascontiguousarray(self.y, dtype=float)
        if not (t.shape == x.shape == y.shape) or t.ndim != 1:
            raise CatalogError("t, x, y must be 1-D arrays of equal length")
        mark = self.mark
        if mark is not None:
            mark = np.ascontiguousarray(mark, dtype=float)
            if mark.shape != t.shape:
                raise CatalogError("mark length does not match events")
        if t.size and (np.any(np.diff(t) < 0)):
            raise CatalogError("events must be sorted by time; use from_arrays")
        for arr in (t, x, y, mark):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mark", mark)

    @classmethod
    def from_arrays(cls, t, x, y, mark=None, dropped: int = 0) -> "EventCatalog":
        """Sort raw columns deterministically by (t, x, y, input index)."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if t.size and (not np.all(np.isfinite(t)) or np.any(t < 0)):
            raise CatalogError("event times must be finite and >= 0")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise CatalogError("event locations must be finite")
        order = np.lexsort((np.arange(t.size), y, x, t))
        m = None if mark is None else np.asarray(mark, dtype=float)[order]
        return cls(t[order], x[order], y[order], m, dropped, order)

    @classmethod
    def from_events(cls, events: Sequence[Event]) -> "EventCatalog":
        marks = [e.mark for e in events]
        has_mark = any(m is not None for m in marks)
        mark = ([np.nan if m is None else m for m in marks] if has_mark else None)
        return cls.from_arrays([e.t for e in events], [e.x for e in events],
                               [e.y for e in events], mark)

    @classmethod
    def empty(cls) -> "EventCatalog":
        return cls(np.empty(0), np.empty(0), np.empty(0))

    @property
    def n(self) -> int:
        return int(self.t.size)

    def __len__(self) -> int:
        return self.n

    @property
    def events(self) -> list[Event]:
        return list(self)

    def __iter__(self) -> Iterator[Event]:
        for i in range(self.n):
            m = None if self.mark is None else float(self.mark[i])
            yield Event(float(self.t[i]), float(self.x[i]), float(self.y[i]), m)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def subset(self, mask_or_index) -> "EventCatalog":
        idx = np.asarray(mask_or_index)
        m = None if self.mark is None else self.mark[idx]
        return EventCatalog(self.t[idx], self.x[idx], self.y[idx], m)

    def rescaled_time(self, factor: float) -> "EventCatalog":
        m = None if self.mark is None else self.mark
        return EventCatalog(self.t * factor, self.x, self.y, m)


def load_catalog(path: str | Path, domain: ObservationDomain,
                 policy: str = "strict") -> EventCatalog:
    """Read a ``t,x,y[,mark]`` CSV file.

    With ``policy="strict"`` an event outside the domain raises
    :class:`CatalogError` naming the row; with ``policy="drop"`` such rows
    are discarded and counted in ``EventCatalog.dropped``.
    """
    if policy not in ("strict", "drop"):
        raise ValueError(f"unknown policy {policy!r}")
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CatalogError("empty catalog") from None
        if header[:3] != ["t", "x", "y"] or len(header) > 4 or (
                len(header) == 4 and header[3] != "mark"):
            raise CatalogError(f"bad header {header!r}; expected t,x,y[,mark]")
        has_mark = len(header) == 4
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CatalogError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise CatalogError(f"row {lineno}: non-numeric field in {row!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise CatalogError(f"row {lineno}: non-finite value")
            rows.append((lineno, vals))
    if not rows:
        raise CatalogError("empty catalog")
    keep = []
    dropped = 0
    for lineno, vals in rows:
        t, x, y = vals[:3]
        if not bool(domain.contains(t, x, y)):
            if policy == "strict":
                raise CatalogError(
                    f"row {lineno}: event (t={t}, x={x}, y={y}) outside the observation domain")
            dropped += 1
            continue
        keep.append(vals)
    if not keep:
        raise CatalogError("empty catalog (all rows outside the domain)")
    arr = np.array(keep, dtype=float)
    mark = arr[:, 3] if has_mark else None
    return EventCatalog.from_arrays(arr[:, 0], arr[:, 1], arr[:, 2], mark, dropped)


def _fmt(v: float) -> str:
    return format(float(v), ".12g")


def save_catalog(catalog: EventCatalog, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if catalog.mark is None:
            w.writerow(["t", "x", "y"])
            for t, x, y in zip(catalog.t, catalog.x, catalog.y):
                w.writerow([_fmt(t), _fmt(x), _fmt(y)])
        else:
            w.writerow(["t", "x", "y", "mark"])
            for t, x, y, m in zip(catalog.t, catalog.x, catalog.y, catalog.mark):
                w.writerow([_fmt(t), _fmt(x), _fmt(y), _fmt(m)])
