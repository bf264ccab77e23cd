"""Time the compiled and numpy kernel cores on simulated catalogs.

Usage: python benchmarks/bench_backends.py [--sizes 500 2000 8000] [--repeat 3]

Both cores are imported directly, so the ``SEPP_BACKEND`` switch is not
needed.  Each kernel is checked for agreement before it is timed.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from sepp import _pycore
from sepp.catalog import ObservationDomain
from sepp.intensity import Constant, GaussianExponential, Histogram, IntensityModel
from sepp.simulate import SimConfig, simulate

try:
    from sepp import _core
except ImportError:
    _core = None


def make_catalog(n: int, seed: int = 0):
    # background rate 0.5 per unit volume with m = 0.5 gives about n events
    model = IntensityModel(Constant(0.5), GaussianExponential(0.5, 1.0, 1e-3))
    domain = ObservationDomain.unit_square(t_end=float(n))
    return simulate(model, domain, SimConfig(seed=seed, pad_time=0.0, pad_space=0.0)).catalog


def kernels(cat):
    t, x, y = cat.t, cat.x, cat.y
    ones = np.ones(cat.n)
    ge = GaussianExponential(0.5, 1.0, 1e-3)
    hist = Histogram(np.array([0.0, 0.5, 1.0, 2.0, 4.0]), np.array([0.0, 0.02, 0.05, 0.1]),
                     np.full((4, 3), 0.1))
    kind, par, te, re, vals = ge.kernel_args()
    hk, hpar, hte, hre, hvals = hist.kernel_args()
    lam = 0.5 + _pycore.event_sums(kind, par, te, re, vals, t, x, y, ones, np.inf)
    rng = np.random.default_rng(1)
    qt, qx, qy = np.sort(rng.uniform(0, t[-1], 2000)), rng.random(2000), rng.random(2000)
    return {
        "event_sums": lambda c: c.event_sums(kind, par, te, re, vals, t, x, y, ones, np.inf),
        "point_sums": lambda c: c.point_sums(kind, par, te, re, vals, t, x, y, ones, np.inf, qt, qx, qy),
        "pair_probs": lambda c: c.pair_probs(kind, par, te, re, vals, t, x, y, ones, np.inf, lam, 1e-12),
        "gexp_moments": lambda c: c.gexp_moments(np.array([1.0, 1.0, 1e-3]), t, x, y, ones, np.inf),
        "hist_cells": lambda c: c.hist_cells(hte, hre, hvals, t, x, y, ones, np.inf, 1.0 / lam),
        "collect_pairs": lambda c: c.collect_pairs(t, x, y, 10.0),
        "prefix_kde": lambda c: c.prefix_kde(x, y, ones, 0.05),
    }


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(np.asarray(o, float)) for o in out])
    return np.ravel(np.asarray(out, float))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[500, 2000, 8000])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _core is None:
        print("compiled core not built; only the numpy core is available")
    print(f"{'kernel':<14} {'n':>6} {'python [ms]':>12} {'cython [ms]':>12} {'speedup':>8}")
    for n in args.sizes:
        cat = make_catalog(n)
        for name, fn in kernels(cat).items():
            t_py = min(timeit.repeat(lambda: fn(_pycore), number=1, repeat=args.repeat))
            if _core is None:
                print(f"{name:<14} {cat.n:>6} {1e3 * t_py:>12.2f} {'-':>12} {'-':>8}")
                continue
            a, b = _flat(fn(_pycore)), _flat(fn(_core))
            if a.shape != b.shape or not np.allclose(a, b, rtol=1e-9, atol=1e-12):
                raise SystemExit(f"{name}: backends disagree at n = {cat.n}")
            t_cy = min(timeit.repeat(lambda: fn(_core), number=1, repeat=args.repeat))
            print(f"{name:<14} {cat.n:>6} {1e3 * t_py:>12.2f} {1e3 * t_cy:>12.2f} {t_py / t_cy:>8.1f}")


if __name__ == "__main__":
    main()
