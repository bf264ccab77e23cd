"""Small dependency-free SVG renderers for catalogs, residual maps and K-functions."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

SIZE = 480
MARGIN = 40
BACKGROUND_COLOUR = "#555555"
# generation 1, 2, 3, ... (cycled)
GENERATION_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


class _Frame:
    """Affine map from data bounds to the drawing square (y up)."""

    def __init__(self, x0, x1, y0, y1):
        span = max(x1 - x0, y1 - y0) or 1.0
        self.x0, self.y0 = x0, y0
        self.scale = (SIZE - 2 * MARGIN) / span
        self.height = (y1 - y0) * self.scale

    def __call__(self, x, y):
        px = MARGIN + (np.asarray(x, float) - self.x0) * self.scale
        py = MARGIN + self.height - (np.asarray(y, float) - self.y0) * self.scale
        return px, py


def _document(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
            f'viewBox="0 0 {SIZE} {SIZE}">')
    return "\n".join([head, f"<title>{escape(title)}</title>",
                      '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]) + "\n"


def _ring(frame, ring, **attrs) -> str:
    px, py = frame(ring[:, 0], ring[:, 1])
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    extra = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in attrs.items())
    return f'<polygon points="{pts}" {extra}/>'


def scatter_svg(x, y, generation=None, region=None, title: str = "events") -> str:
    """Event locations; background events grey, triggered ones coloured by generation."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    gen = np.zeros(x.size, int) if generation is None else np.asarray(generation, int)
    if region is not None:
        x0, x1, y0, y1 = region.bounds
    elif x.size:
        x0, x1, y0, y1 = x.min(), x.max(), y.min(), y.max()
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    frame = _Frame(x0, x1, y0, y1)
    body = []
    if region is not None:
        body.append(_ring(frame, np.asarray(region.vertices), fill="none", stroke="black"))
    px, py = frame(x, y)
    for a, b, g in zip(px, py, gen):
        colour = BACKGROUND_COLOUR if g <= 0 else GENERATION_COLOURS[(g - 1) % len(GENERATION_COLOURS)]
        body.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2" fill="{colour}"/>')
    return _document(body, title)


def _diverging(v: float, vmax: float) -> str:
    """Blue (negative) through white to red (positive)."""
    if not math.isfinite(v) or vmax <= 0:
        return "#dddddd"
    s = max(-1.0, min(1.0, v / vmax))
    fade = int(round(255 * (1 - abs(s))))
    return f"#ff{fade:02x}{fade:02x}" if s > 0 else f"#{fade:02x}{fade:02x}ff"


def voronoi_svg(rmap, region=None, values: str = "standardized") -> str:
    """Voronoi cells coloured by residual on a symmetric diverging scale."""
    vals = np.asarray(getattr(rmap, values), float)
    rings = [np.asarray(c) for c in rmap.cells]
    if region is not None:
        x0, x1, y0, y1 = region.bounds
    else:
        allpts = np.vstack(rings)
        x0, x1 = allpts[:, 0].min(), allpts[:, 0].max()
        y0, y1 = allpts[:, 1].min(), allpts[:, 1].max()
    frame = _Frame(x0, x1, y0, y1)
    finite = vals[np.isfinite(vals)]
    vmax = float(np.max(np.abs(finite))) if finite.size else 0.0
    body = [_ring(frame, ring, fill=_diverging(v, vmax), stroke="#888888", stroke_width="0.3")
            for ring, v in zip(rings, vals)]
    return _document(body, f"Voronoi residuals ({values})")


def k_function_svg(result, title: str = "K-function") -> str:
    """K-hat, the envelope bounds and pi r^2, one polyline each over the radii."""
    r = np.asarray(result.radii, float)
    curves = {"env_lo": (result.env_lo, "#999999"), "env_hi": (result.env_hi, "#999999"),
              "poisson": (np.pi * r ** 2, "#2ca02c"), "khat": (result.khat, "#d62728")}
    top = max(float(np.nanmax(np.asarray(c, float))) for c, _ in curves.values()) or 1.0
    w = SIZE - 2 * MARGIN
    span = float(r.max() - r.min()) or 1.0
    body = [f'<rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{w}" fill="none" stroke="black"/>']
    for name, (curve, colour) in curves.items():
        px = MARGIN + (r - r.min()) / span * w
        py = MARGIN + w - np.asarray(curve, float) / top * w
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        body.append(f'<polyline class="{name}" points="{pts}" fill="none" stroke="{colour}"/>')
    return _document(body, title)
