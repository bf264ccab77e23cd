"""End-to-end acceptance checks, one test per criterion.

Each test appends a ``criterion k ... PASS/FAIL`` line that the terminal
summary prints at the end of the run, then asserts.
"""
import contextlib
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

import acceptance_log
from oracles import g_etas, g_gauss_exp, histogram_loglik, riemann_loglik
from sepp.catalog import EventCatalog, ObservationDomain
from sepp.decluster import misd_fit
from sepp.diagnostics import (
    information_criteria, quadrat_test, sign_test, super_thin, voronoi_residuals,
)
from sepp.fit_em import branching_probabilities, em_fit, log_likelihood
from sepp.inference import asymptotic_covariance, parametric_bootstrap
from sepp.intensity import (
    Constant, EtasPowerLaw, GaussianExponential, GridField, Histogram, IntensityModel,
)
from sepp.simulate import SimConfig, cluster_sizes, simulate

UNPADDED = dict(pad_time=0.0, pad_space=0.0)


@contextlib.contextmanager
def criterion(k: int, title: str):
    """Collects ``detail`` and ``ok`` from the body and records one line."""
    rec = {"ok": False, "detail": "did not finish"}
    start = time.perf_counter()
    try:
        yield rec
    finally:
        status = "PASS" if rec["ok"] else "FAIL"
        acceptance_log.LINES.append(
            f"criterion {k} {status}  {title}: {rec['detail']} [{time.perf_counter() - start:.0f}s]")


def centre_square(inside=8.0, outside=0.25):
    e = np.linspace(0.0, 1.0, 4)
    v = np.full((3, 3), outside)
    v[1, 1] = inside
    return GridField(e, e, v)


def in_centre(x, y):
    return (x > 1 / 3) & (x < 2 / 3) & (y > 1 / 3) & (y < 2 / 3)


# -- 1 ------------------------------------------------------------------------------


def test_c1_cluster_size():
    with criterion(1, "mean cluster size at m = 0.75") as rec:
        model = IntensityModel(Constant(50.0), GaussianExponential(0.75, 1.0, 1e-4))
        dom = ObservationDomain.unit_square(2100.0)
        pad = 30.0
        res = simulate(model, dom, SimConfig(seed=1, pad_time=0.0, pad_space=0.1))
        inside = dom.region.contains(res.raw_x, res.raw_y)
        roots = np.flatnonzero((res.raw_parent < 0) & (res.raw_t < dom.t_end - pad))
        sizes = cluster_sizes(res, t_max=dom.t_end - pad)[inside[roots]]
        mean = float(sizes.mean())
        rec["ok"] = sizes.size >= 10_000 and abs(mean - 4.0) <= 0.1
        rec["detail"] = f"{mean:.4f} over {sizes.size} clusters (target 4 +- 0.1)"
    assert rec["ok"], rec["detail"]


# -- 2 ------------------------------------------------------------------------------


def test_c2_ogata_matches_cluster():
    with criterion(2, "Ogata vs cluster event counts") as rec:
        model = IntensityModel(Constant(10.0), GaussianExponential(0.5, 0.5, 1e-3))
        dom = ObservationDomain.unit_square(20.0)
        a = [simulate(model, dom, SimConfig(seed=s)).catalog.n for s in range(500)]
        b = [simulate(model, dom, SimConfig(seed=10_000 + s, method="ogata")).catalog.n
             for s in range(500)]
        p = stats.ks_2samp(a, b).pvalue
        rec["ok"] = p > 0.01
        rec["detail"] = f"KS p = {p:.3f} (means {np.mean(a):.1f} vs {np.mean(b):.1f}, 500 seeds each)"
    assert rec["ok"], rec["detail"]


# -- 3 ------------------------------------------------------------------------------

FIX_T = [0.1, 0.35, 0.6, 0.62, 0.9]
FIX_X = [0.5, 0.55, 0.93, 0.1, 0.52]
FIX_Y = [0.5, 0.45, 0.9, 0.05, 0.47]
HIST_TE = np.array([0.0, 0.2, 0.5, 1.0])
HIST_RE = np.array([0.0, 0.05, 0.12, 0.3])
HIST_V = np.array([[4.0, 2.0, 0.5], [2.0, 1.0, 0.3], [0.5, 0.2, 0.1]])


def _oracle(kind):
    nu = 1.5
    if kind == "gaussian_exponential":
        th, om, s2 = 0.4, 0.3, 0.02
        fam = GaussianExponential(th, om, s2)
        want = riemann_loglik(
            nu, FIX_T, FIX_X, FIX_Y, 1.0, lambda dx, dy, dt: float(g_gauss_exp(th, om, s2, dx, dy, dt)),
            lambda dx, dy: np.exp(-(dx * dx + dy * dy) / (2 * s2)) / (2 * np.pi * s2),
            lambda u: th * math.exp(-u / om) / om)
    elif kind == "etas":
        K0, c, p, d, q = 0.05, 0.1, 1.6, 0.01, 2.0
        fam = EtasPowerLaw(K0, 0.0, c, p, d, q)
        want = riemann_loglik(
            nu, FIX_T, FIX_X, FIX_Y, 1.0, lambda dx, dy, dt: float(g_etas(K0, 0.0, c, p, d, q, dx, dy, dt)),
            lambda dx, dy: (q - 1) / (np.pi * d) * (1 + (dx * dx + dy * dy) / d) ** (-q),
            lambda u: K0 * (u + c) ** (-p))
    else:
        fam = Histogram(HIST_TE, HIST_RE, HIST_V)
        want = histogram_loglik(nu, FIX_T, FIX_X, FIX_Y, 1.0, HIST_TE, HIST_RE, HIST_V)
    return IntensityModel(Constant(nu), fam), want


def test_c3_loglik_oracle():
    with criterion(3, "log-likelihood vs brute-force quadrature") as rec:
        cat = EventCatalog.from_arrays(FIX_T, FIX_X, FIX_Y)
        errs = {}
        for kind in ("gaussian_exponential", "etas", "histogram"):
            model, want = _oracle(kind)
            got = log_likelihood(model, cat, ObservationDomain.unit_square(1.0))
            errs[kind] = abs(got - want) / abs(want)
        rec["ok"] = all(e < 1e-4 for e in errs.values())
        rec["detail"] = ", ".join(f"{k} rel {v:.1e}" for k, v in errs.items()) + " (tol 1e-4)"
    assert rec["ok"], rec["detail"]


# -- 4 ------------------------------------------------------------------------------

GE_TRUTH = IntensityModel(Constant(2.0), GaussianExponential(0.5, 1.0, 0.01))
GE_DOMAIN = ObservationDomain.unit_square(570.0)


def test_c4_em_recovery():
    with criterion(4, "EM recovery of (nu, theta, omega, sigma2)") as rec:
        truth = np.array(GE_TRUTH.params())
        errs, sizes, monotone = [], [], True
        for s in range(50):
            cat = simulate(GE_TRUTH, GE_DOMAIN, SimConfig(seed=s, **UNPADDED)).catalog
            fit = em_fit(GaussianExponential(0.3, 0.5, 0.02), Constant(1.0), cat, GE_DOMAIN)
            tr = np.asarray(fit.loglik_trace)
            monotone &= bool(np.all(np.diff(tr) >= -1e-9 * np.abs(tr[1:])))
            errs.append(np.abs(np.array(fit.model.params()) / truth - 1))
            sizes.append(cat.n)
        med = np.median(errs, axis=0)
        rec["ok"] = bool(np.all(med < 0.10)) and monotone
        rec["detail"] = (f"median rel err {np.round(med, 3).tolist()}, traces monotone {monotone}, "
                         f"mean n {np.mean(sizes):.0f}")
    assert rec["ok"], rec["detail"]


# -- 5 ------------------------------------------------------------------------------


def test_c5_branching_calibration():
    with criterion(5, "sum of background probabilities") as rec:
        worst = 0.0
        for s in range(50):
            res = simulate(GE_TRUTH, GE_DOMAIN, SimConfig(seed=100 + s, **UNPADDED))
            p0 = branching_probabilities(GE_TRUTH, res.catalog).p_background.sum()
            worst = max(worst, abs(p0 - res.n_background) / math.sqrt(res.catalog.n))
        rec["ok"] = worst <= 3.0
        rec["detail"] = f"max |sum p0 - N_bg| / sqrt(n) = {worst:.2f} over 50 seeds (limit 3)"
    assert rec["ok"], rec["detail"]


# -- 6 ------------------------------------------------------------------------------


def test_c6_covariance_sanity():
    with criterion(6, "Poisson covariance and bootstrap SD") as rec:
        dom = ObservationDomain.unit_square(50.0)
        nu = 3.0
        cat = simulate(IntensityModel(Constant(nu)), dom, SimConfig(seed=6)).catalog
        nu_hat = cat.n / (dom.area * dom.t_end)
        cov = asymptotic_covariance(IntensityModel(Constant(nu_hat)), cat, analytic=True)
        exact = abs(cov.sigma_hat[0, 0] / (nu_hat ** 2 / cat.n) - 1)
        boot = parametric_bootstrap(IntensityModel(Constant(nu)), dom, B=1000, seed=6)
        want = math.sqrt(nu / (dom.area * dom.t_end))
        sd_err = abs(boot.sd[0] / want - 1)
        rec["ok"] = exact < 1e-12 and sd_err < 0.15
        rec["detail"] = f"closed form rel {exact:.1e}; bootstrap SD off by {100 * sd_err:.1f}% (B=1000)"
    assert rec["ok"], rec["detail"]


# -- 7 ------------------------------------------------------------------------------


def test_c7_bootstrap_coverage():
    with criterion(7, "95% percentile interval coverage") as rec:
        nu, dom = 3.0, ObservationDomain.unit_square(100.0)
        truth = IntensityModel(Constant(nu))
        hits = 0
        for r in range(200):
            cat = simulate(truth, dom, SimConfig(seed=r, **UNPADDED)).catalog
            fitted = IntensityModel(Constant(cat.n / (dom.area * dom.t_end)))
            lo, hi = parametric_bootstrap(fitted, dom, B=1000, seed=50_000 + r).intervals[0]
            hits += lo <= nu <= hi
        cover = hits / 200
        rec["ok"] = abs(cover - 0.95) <= 0.05
        rec["detail"] = f"coverage {100 * cover:.1f}% over 200 repetitions (B=1000)"
    assert rec["ok"], rec["detail"]


# -- 8 ------------------------------------------------------------------------------

CENTRE_TRUTH = IntensityModel(centre_square(), GaussianExponential(0.75, 1.0, 1e-4))
CENTRE_DOMAIN = ObservationDomain.unit_square(600.0)


def test_c8_diagnostics_discriminate():
    with criterion(8, "Voronoi sign tests and super-thinned homogeneity") as rec:
        detected, p_worst = 0, 0.0
        for s in range(10):
            cat = simulate(CENTRE_TRUTH, CENTRE_DOMAIN, SimConfig(seed=s, **UNPADDED)).catalog
            fit = em_fit(GaussianExponential(0.5, 1.0, 1e-3), Constant(1.0), cat, CENTRE_DOMAIN)
            vm = voronoi_residuals(fit.model, cat, CENTRE_DOMAIN)
            ins = in_centre(cat.x[vm.event_index], cat.y[vm.event_index])
            p = max(sign_test(vm.raw[ins], "greater"), sign_test(vm.raw[~ins], "less"))
            p_worst = max(p_worst, p)
            detected += p < 0.01
        passed = 0
        for s in range(200):
            cat = simulate(CENTRE_TRUTH, CENTRE_DOMAIN, SimConfig(seed=1000 + s, **UNPADDED)).catalog
            st = super_thin(CENTRE_TRUTH, cat, CENTRE_DOMAIN, seed=s)
            passed += quadrat_test(st.xy, CENTRE_DOMAIN)[1] > 0.01
        rec["ok"] = detected == 10 and passed >= 190
        rec["detail"] = (f"misfit detected in {detected}/10 fits (worst p {p_worst:.1e}); "
                         f"correct model homogeneous in {passed}/200")
    assert rec["ok"], rec["detail"]


# -- 9 ------------------------------------------------------------------------------


def test_c9_misd_recovery():
    with criterion(9, "MISD histogram recovery") as rec:
        te = np.array([0.0, 0.5, 2.0])
        re = np.array([0.0, 0.03, 0.1])
        meas = np.diff(te)[:, None] * np.pi * np.diff(re ** 2)[None, :]
        mass = np.array([[0.3, 0.05], [0.1, 0.05]])
        truth = IntensityModel(Constant(5.0), Histogram(te, re, mass / meas))
        dom = ObservationDomain.unit_square(500.0)
        cells, totals, sizes = [], [], []
        for s in range(20):
            cat = simulate(truth, dom, SimConfig(seed=s, **UNPADDED)).catalog
            res = misd_fit(cat, dom, te, re, max_iter=1000)
            cells.append(res.histogram.cell_values)
            totals.append(res.total_mass)
            sizes.append(cat.n)
        rel = np.abs(np.mean(cells, axis=0) / (mass / meas) - 1)
        se = np.std(totals, ddof=1) / math.sqrt(len(totals))
        z = abs(np.mean(totals) - 0.5) / se
        rec["ok"] = bool(np.all(rel < 0.2)) and z <= 3
        rec["detail"] = (f"worst cell rel err {rel.max():.3f}; total mass {np.mean(totals):.4f} "
                         f"vs 0.5 ({z:.2f} SE); mean n {np.mean(sizes):.0f}")
    assert rec["ok"], rec["detail"]


# -- 10 -----------------------------------------------------------------------------


def _candidates(cat, dom):
    kw = dict(max_lag=20.0, tol=1e-4, ll_tol=1e-3)
    ge = em_fit(GaussianExponential(0.3, 0.5, 0.02), Constant(1.0), cat, dom, **kw)
    g = ge.model.triggering
    # heavy-tailed start that matches the fitted Gaussian-exponential scales
    p, q = 21.0, 51.0
    c, d = g.omega * (p - 1), 2 * g.sigma2 * (q - 1)
    etas0 = EtasPowerLaw(g.theta * (p - 1) * c ** (p - 1), 0.0, c, p, d, q)
    etas = em_fit(etas0, ge.model.background, cat, dom, **kw)
    pois = em_fit(None, Constant(1.0), cat, dom)
    return {"poisson": pois, "gaussian_exponential": ge, "etas": etas}


def test_c10_aic_selects_generating_family():
    with criterion(10, "AIC picks the generating family") as rec:
        wins, sizes = 0, []
        for s in range(100):
            cat = simulate(GE_TRUTH, GE_DOMAIN, SimConfig(seed=2000 + s, **UNPADDED)).catalog
            fits = _candidates(cat, GE_DOMAIN)
            aic = {k: information_criteria(f.loglik, f.n_free, cat.n)["AIC"] for k, f in fits.items()}
            wins += min(aic, key=aic.get) == "gaussian_exponential"
            sizes.append(cat.n)
        rec["ok"] = wins >= 90
        rec["detail"] = f"{wins}/100 seeds (mean n {np.mean(sizes):.0f})"
    assert rec["ok"], rec["detail"]


# -- 11 -----------------------------------------------------------------------------

PIPELINE = """
[run]
seed = 11
output_dir = {out}
[domain]
t_end = 25
[catalog]
path = {out}/catalog.csv
[model]
nu = 3.0
theta = 0.75
omega = 1.0
sigma2 = 0.001
[simulate]
method = {method}
[fit]
tol = 1e-5
ll_tol = 1e-6
[bootstrap]
replicates = 24
block = 5
workers = {workers}
[diagnose]
nsim = 39
"""


def _pipeline(root: Path, name: str, threads: str, workers: int, method: str) -> Path:
    out = root / name
    cfg = root / f"{name}.ini"
    cfg.write_text(PIPELINE.format(out=out, workers=workers, method=method))
    env = dict(os.environ, OMP_NUM_THREADS=threads, OPENBLAS_NUM_THREADS=threads,
               MKL_NUM_THREADS=threads)
    env.pop("SEPP_OUTPUT_DIR", None)
    src = str(Path(__file__).resolve().parents[1] / "src")
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    for cmd in ("simulate", "fit", "decluster", "bootstrap", "diagnose"):
        proc = subprocess.run([sys.executable, "-m", "sepp.cli", cmd, str(cfg)], env=env,
                              capture_output=True, text=True)
        assert proc.returncode == 0, (cmd, proc.stderr)
    return out


def _snapshot(out: Path, skip_echo: bool = False) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())
            if not (skip_echo and p.name.endswith("_config.ini"))}


def test_c11_determinism(tmp_path):
    with criterion(11, "byte-identical reruns across thread counts") as rec:
        diffs, n_files = [], 0
        for method in ("cluster", "ogata"):
            a = _snapshot(_pipeline(tmp_path, f"a_{method}", "1", 1, method))
            again = _snapshot(_pipeline(tmp_path, f"a_{method}", "1", 1, method))
            b = _snapshot(_pipeline(tmp_path, f"b_{method}", "4", 3, method), skip_echo=True)
            diffs += [f"{method}/{k} (rerun)" for k in a if a[k] != again.get(k)]
            diffs += [f"{method}/{k} (threads)" for k in b if b[k] != a.get(k)]
            n_files += len(a)
        rec["ok"] = not diffs
        rec["detail"] = (f"{n_files} files identical over 5 commands x 2 simulators" if not diffs
                         else "differs: " + ", ".join(diffs))
    assert rec["ok"], rec["detail"]
