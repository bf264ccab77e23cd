import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import riemann_cell_integral
from sepp.catalog import EventCatalog, ObservationDomain, Polygon
from sepp.diagnostics import (
    information_criteria, intensity_bounds, k_envelope, k_function, quadrat_test, select_model,
    sign_test, super_thin, thin_residuals, voronoi_cells, voronoi_residuals,
)
from sepp.intensity import Constant, GaussianExponential, GridField, IntensityModel, integrated_intensity
from sepp.simulate import SimConfig, simulate

UNIT = ObservationDomain.unit_square(1.0)
GE = GaussianExponential(0.5, 1.0, 0.01)
RADII = np.linspace(0.01, 0.25, 25)


def sim(model, T, seed, pad=False):
    cfg = SimConfig(seed=seed) if pad else SimConfig(seed=seed, pad_time=0.0, pad_space=0.0)
    dom = ObservationDomain.unit_square(T)
    return simulate(model, dom, cfg).catalog, dom


def centre_grid(inside=8.0, outside=0.25):
    e = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    v = np.full((3, 3), outside)
    v[1, 1] = inside
    return GridField(e, e, v)


# -- intensity bounds -----------------------------------------------------------


def test_bounds_of_constant_model():
    cat, dom = sim(IntensityModel(Constant(3.0)), 5.0, 0)
    assert intensity_bounds(IntensityModel(Constant(3.0)), cat, dom) == (3.0, 3.0)


def test_sup_covers_event_intensities():
    model = IntensityModel(Constant(2.0), GE)
    cat, dom = sim(model, 20.0, 1)
    b, top = intensity_bounds(model, cat, dom)
    assert b == 2.0
    assert top >= model.intensity_at_events(cat).max()


# -- thinning -------------------------------------------------------------------


def test_thin_constant_keeps_everything():
    model = IntensityModel(Constant(4.0))
    cat, dom = sim(model, 5.0, 2)
    res = thin_residuals(model, cat, dom, seed=0)
    assert res.n == cat.n and np.all(res.retention == 1.0)


def test_thin_expected_count():
    model = IntensityModel(Constant(2.0), GE)
    cat, dom = sim(model, 30.0, 3)
    p = thin_residuals(model, cat, dom, seed=0).retention
    counts = np.array([thin_residuals(model, cat, dom, seed=s, b=2.0).n for s in range(1000)])
    se = math.sqrt(np.sum(p * (1 - p)) / counts.size)
    assert abs(counts.mean() - p.sum()) < 3 * se


def test_thin_warns_when_infimum_vanishes():
    model = IntensityModel(centre_grid(outside=0.0))
    cat, dom = sim(model, 5.0, 4)
    with pytest.warns(UserWarning, match="uninformative"):
        thin_residuals(model, cat, dom)


def test_thinned_correct_model_inside_envelope():
    model = IntensityModel(Constant(2.0), GaussianExponential(0.5, 1.0, 1e-3))
    inside = 0
    for s in range(20):
        cat, dom = sim(model, 60.0, 100 + s)
        res = thin_residuals(model, cat, dom, seed=s, b=2.0)
        inside += k_envelope(res.xy, dom, RADII, nsim=999, seed=s).inside
    assert inside >= 19


# -- super-thinning -------------------------------------------------------------


def test_super_thin_at_constant_rate_is_identity():
    model = IntensityModel(Constant(3.0))
    cat, dom = sim(model, 5.0, 5)
    res = super_thin(model, cat, dom, k=3.0)
    assert res.n == cat.n and not res.superposed.any()


def test_super_thin_count_is_poisson():
    model = IntensityModel(Constant(2.0), GE)
    k = 3.0
    counts = []
    for s in range(200):
        cat, dom = sim(model, 20.0, 200 + s)
        counts.append(super_thin(model, cat, dom, k=k, seed=s).n)
    mean = k * 20.0
    assert abs(np.mean(counts) - mean) < 3 * math.sqrt(mean / len(counts))


def test_super_thin_rejects_k_out_of_range():
    model = IntensityModel(Constant(2.0), GE)
    cat, dom = sim(model, 10.0, 6)
    with pytest.raises(ValueError, match="outside"):
        super_thin(model, cat, dom, k=1.0)


def test_super_thin_misfit_exits_envelope():
    truth = IntensityModel(centre_grid())
    cat, dom = sim(truth, 100.0, 7)
    fitted = IntensityModel(Constant(cat.n / dom.volume))
    res = super_thin(fitted, cat, dom, seed=0)
    env = k_envelope(res.xy, dom, RADII, nsim=199, seed=0)
    assert env.above.any()


def test_super_thin_csv_flags_origin(tmp_path):
    model = IntensityModel(Constant(2.0), GE)
    cat, dom = sim(model, 10.0, 8)
    res = super_thin(model, cat, dom, k=3.0, seed=1)
    res.write_csv(tmp_path / "s.csv")
    rows = list(csv.DictReader((tmp_path / "s.csv").open()))
    assert sum(r["origin"] == "simulated" for r in rows) == int(res.superposed.sum())


# -- K-function -----------------------------------------------------------------


def test_coincident_pair_counted_both_ways():
    pts = np.array([[0.3, 0.3], [0.3, 0.3]])
    for corr in ("none", "translation"):
        # |X| / (n (n - 1)) * 2 ordered pairs
        assert k_function(pts, UNIT, [0.1], corr)[0] == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 80), st.integers(0, 2 ** 31), st.sampled_from(["none", "translation"]))
def test_k_monotone(n, seed, corr):
    rng = np.random.default_rng(seed)
    k = k_function(rng.random((n, 2)), UNIT, np.linspace(0.0, 0.5, 30), corr)
    assert np.all(np.diff(k) >= 0)


def test_k_brute_force_oracle():
    rng = np.random.default_rng(0)
    pts = rng.random((40, 2))
    d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
    for r in (0.05, 0.1, 0.3):
        want = (np.sum(d <= r) - 40) / (40 * 39)
        assert k_function(pts, UNIT, [r])[0] == pytest.approx(want)


def test_poisson_patterns_inside_envelope_near_pi_r2():
    inside, khat = 0, []
    for s in range(20):
        pts = np.random.default_rng(s).random((200, 2))
        env = k_envelope(pts, UNIT, RADII, nsim=999, seed=s, correction="translation")
        inside += env.inside
        khat.append(env.khat)
    assert inside >= 19
    np.testing.assert_allclose(np.mean(khat, axis=0), np.pi * RADII ** 2, rtol=0.1)


def test_clustered_above_envelope_at_small_r():
    model = IntensityModel(Constant(5.0), GaussianExponential(0.75, 1.0, 1e-4))
    small = np.linspace(0.005, 0.03, 6)
    above = 0
    for s in range(20):
        cat, dom = sim(model, 20.0, 300 + s)
        above += k_envelope(cat.xy, dom, small, nsim=99, seed=s).above.any()
    assert above >= 19


def test_radii_beyond_diameter_warn():
    with pytest.warns(UserWarning):
        k_function(np.random.default_rng(0).random((5, 2)), UNIT, [2.0])


def test_k_csv(tmp_path):
    env = k_envelope(np.random.default_rng(2).random((30, 2)), UNIT, RADII, nsim=19)
    env.write_csv(tmp_path / "k.csv")
    rows = list(csv.reader((tmp_path / "k.csv").open()))
    assert rows[0] == ["r", "khat", "env_lo", "env_hi"] and len(rows) == RADII.size + 1


# -- Voronoi residuals ----------------------------------------------------------


TRIANGLE = Polygon(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 60), st.integers(0, 2 ** 31))
def test_cells_partition_window(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    cells = voronoi_cells(pts[:, 0], pts[:, 1], UNIT.region)
    assert sum(Polygon(c).area() for c in cells) == pytest.approx(1.0, rel=1e-6)
    # each cell holds its generator
    for c, p in zip(cells, pts):
        assert Polygon(c).contains(p[0], p[1])


def test_cells_partition_triangle():
    rng = np.random.default_rng(3)
    pts = rng.random((200, 2))
    pts = pts[pts.sum(axis=1) < 1][:60]
    cells = voronoi_cells(pts[:, 0], pts[:, 1], TRIANGLE)
    assert sum(Polygon(c).area() for c in cells) == pytest.approx(0.5, rel=1e-6)


@pytest.mark.parametrize("x, y", [
    ([0.1, 0.2, 0.3], [0.1, 0.2, 0.3]),
    ([0.1, 0.1, 0.5], [0.2, 0.2, 0.5]),
])
def test_degenerate_voronoi_inputs(x, y):
    with pytest.raises(ValueError):
        voronoi_cells(np.array(x), np.array(y), UNIT.region)


def test_cell_integrals_sum_to_compensator():
    model = IntensityModel(Constant(2.0), GE)
    cat, dom = sim(model, 20.0, 9)
    vr = voronoi_residuals(model, cat, dom)
    total = integrated_intensity(model, cat, dom, "cubature")
    assert vr.integral.sum() == pytest.approx(total, rel=1e-6)
    assert vr.area.sum() == pytest.approx(1.0, rel=1e-6)


def test_perfect_homogeneous_fit_mean_residual():
    model = IntensityModel(Constant(5.0))
    cat, dom = sim(model, 100.0, 10)
    vr = voronoi_residuals(model, cat, dom)
    assert abs(vr.raw.mean()) < 3 / math.sqrt(500.0)
    np.testing.assert_allclose(vr.integral, 5.0 * 100.0 * vr.area)


def test_single_cell_matches_riemann_oracle():
    rng = np.random.default_rng(4)
    t = np.sort(rng.uniform(0, 3.0, 6))
    x, y = rng.uniform(0.2, 0.8, 6), rng.uniform(0.2, 0.8, 6)
    cat = EventCatalog.from_arrays(t, x, y)
    dom = ObservationDomain.unit_square(3.0)
    theta, omega, s2 = 0.6, 0.7, 0.02
    model = IntensityModel(Constant(1.5), GaussianExponential(theta, omega, s2))
    vr = voronoi_residuals(model, cat, dom)
    c = int(np.argmax(vr.area))
    want = riemann_cell_integral(
        1.5, t, x, y, 3.0,
        lambda dx, dy: theta / (2 * np.pi * s2) * np.exp(-(dx * dx + dy * dy) / (2 * s2)),
        lambda u: np.exp(-u / omega) / omega, vr.cells[c], m=2000)
    assert vr.integral[c] == pytest.approx(want, rel=1e-4)


def test_voronoi_time_window_and_csv(tmp_path):
    model = IntensityModel(Constant(2.0), GE)
    cat, dom = sim(model, 20.0, 11)
    vr = voronoi_residuals(model, cat, dom, window=(5.0, 10.0))
    assert np.all((cat.t[vr.event_index] >= 5.0) & (cat.t[vr.event_index] < 10.0))
    vr.write_csv(tmp_path / "v.csv")
    rows = list(csv.DictReader((tmp_path / "v.csv").open()))
    assert list(rows[0]) == ["event_index", "area", "integral", "raw", "standardized"]
    with pytest.raises(ValueError):
        voronoi_residuals(model, cat, dom, window=(5.0, 30.0))


# -- tests and criteria ---------------------------------------------------------


def test_sign_test_directions():
    v = np.r_[np.ones(15), -np.ones(2), 0.0]
    assert sign_test(v, "greater") < 0.01
    assert sign_test(v, "less") > 0.99
    assert sign_test([]) == 1.0


def test_quadrat_homogeneous_and_clustered():
    rng = np.random.default_rng(5)
    _, p = quadrat_test(rng.random((500, 2)), UNIT)
    assert p > 0.01
    clustered = 0.5 + 0.05 * rng.standard_normal((500, 2))
    _, p = quadrat_test(clustered, UNIT)
    assert p < 1e-6


def test_quadrat_on_polygon_uses_clipped_areas():
    rng = np.random.default_rng(6)
    pts = rng.random((4000, 2))
    pts = pts[pts.sum(axis=1) < 1]
    _, p = quadrat_test(pts, ObservationDomain(TRIANGLE, 1.0), (4, 4))
    assert p > 0.01


def test_information_criteria_examples():
    ic = information_criteria(-100.0, 3, 50)
    assert ic["AIC"] == 206.0
    assert ic["BIC"] == pytest.approx(3 * math.log(50) + 200)
    assert ic["HQ"] == pytest.approx(6 * math.log(math.log(50)) + 200)
    assert information_criteria(-100.0, 0, 50)["AIC"] == 200.0
    assert "HQ" not in information_criteria(-1.0, 1, 2)
    with pytest.raises(ValueError):
        information_criteria(float("nan"), 1, 10)


def test_select_model_table(tmp_path):
    tab = select_model({"poisson": (-120.0, 1), "ge": (-100.0, 4), "etas": (-99.5, 6)}, 200)
    assert tab.best == "ge"
    tab.write_csv(tmp_path / "s.csv")
    rows = list(csv.DictReader((tmp_path / "s.csv").open()))
    assert [r["model"] for r in rows if r["best_aic"] == "1"] == ["ge"]
    with pytest.raises(ValueError):
        select_model({"a": (-1.0, 1)}, 2, criterion="HQ")
