import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepp.catalog import EventCatalog, ObservationDomain, Polygon, Rectangle
from sepp.fit_em import (
    ZeroIntensityError, adaptive_bandwidths, branching_probabilities, em_fit, flp_fit,
    flp_increments, flp_score, log_likelihood, log_likelihood_gradient, semiparametric_fit,
)
from sepp.intensity import (
    Constant, EtasPowerLaw, GaussianExponential, GridField, Histogram, IntensityModel, WeightedKde,
)
from sepp.simulate import SimConfig, simulate

from oracles import g_gauss_exp, riemann_loglik

UNIT = ObservationDomain.unit_square(1.0)


def poisson_catalog(nu, T, seed):
    dom = ObservationDomain.unit_square(T)
    return simulate(IntensityModel(Constant(nu)), dom, SimConfig(seed=seed)).catalog, dom


# -- log-likelihood -----------------------------------------------------------


@pytest.mark.parametrize("nu, n", [(2.0, 3), (0.5, 10), (7.0, 1)])
def test_poisson_closed_form(nu, n):
    cat = EventCatalog.from_arrays(np.linspace(0.1, 0.9, n), np.full(n, 0.5), np.full(n, 0.5))
    model = IntensityModel(Constant(nu))
    assert log_likelihood(model, cat, UNIT) == pytest.approx(n * math.log(nu) - nu, rel=1e-14)


def test_three_log_two_minus_two():
    cat = EventCatalog.from_arrays([0.1, 0.2, 0.3], [0.1, 0.5, 0.9], [0.5, 0.5, 0.5])
    assert log_likelihood(IntensityModel(Constant(2.0)), cat, UNIT) == pytest.approx(0.0794, abs=1e-4)


def test_three_event_gauss_exp_riemann():
    th, om, s2 = 0.4, 0.3, 0.02
    t, x, y = [0.1, 0.35, 0.6], [0.5, 0.55, 0.93], [0.5, 0.45, 0.9]
    cat = EventCatalog.from_arrays(t, x, y)
    model = IntensityModel(Constant(2.0), GaussianExponential(th, om, s2))
    oracle = riemann_loglik(
        2.0, t, x, y, 1.0,
        lambda dx, dy, dt: float(g_gauss_exp(th, om, s2, dx, dy, dt)),
        lambda dx, dy: np.exp(-(dx * dx + dy * dy) / (2 * s2)) / (2 * np.pi * s2),
        lambda u: th * math.exp(-u / om) / om)
    assert log_likelihood(model, cat, UNIT) == pytest.approx(oracle, rel=1e-4)


def test_zero_intensity_error_names_event():
    cat = EventCatalog.from_arrays([0.1, 0.2], [0.5, 0.5], [0.5, 0.5])
    with pytest.raises(ZeroIntensityError, match="index 0"):
        log_likelihood(IntensityModel(Constant(0.0), GaussianExponential(0.5, 1, 0.01)), cat, UNIT)


def test_subregion_variant_reduces_to_full_window():
    cat = EventCatalog.from_arrays([0.1, 0.2, 0.5], [0.2, 0.5, 0.7], [0.5, 0.4, 0.3])
    model = IntensityModel(Constant(1.5), GaussianExponential(0.5, 0.2, 0.01))
    full = log_likelihood(model, cat, UNIT)
    assert log_likelihood(model, cat, UNIT, subregion=Rectangle(0, 1, 0, 1)) == pytest.approx(full, rel=1e-12)


# -- branching ----------------------------------------------------------------


def test_first_event_is_background():
    rng = np.random.default_rng(0)
    cat = EventCatalog.from_arrays(np.sort(rng.random(20)), rng.random(20), rng.random(20))
    b = branching_probabilities(IntensityModel(Constant(1.0), GaussianExponential(0.5, 1, 0.01)), cat)
    assert b.p_background[0] == 1.0


def test_two_event_probability():
    cat = EventCatalog.from_arrays([0.0, 1.0], [0.4, 0.5], [0.5, 0.5])
    b = branching_probabilities(IntensityModel(Constant(0.5), GaussianExponential(0.3, 1, 0.01)), cat)
    g = 0.3 / (2 * math.pi * 0.01) * math.exp(-1.5)
    par, pr = b.row(1)
    assert list(par) == [0]
    assert pr[0] == pytest.approx(g / (0.5 + g), rel=1e-13)
    assert pr[0] == pytest.approx(0.680, abs=1e-3)


def test_no_triggering_all_background():
    rng = np.random.default_rng(1)
    cat = EventCatalog.from_arrays(np.sort(rng.random(30)), rng.random(30), rng.random(30))
    b = branching_probabilities(IntensityModel(Constant(1.0), GaussianExponential(0.0, 1, 0.01)), cat)
    np.testing.assert_array_equal(b.p_background, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 60), st.sampled_from(["ge", "etas", "hist"]))
def test_rows_sum_to_one(seed, n, fam):
    rng = np.random.default_rng(seed)
    cat = EventCatalog.from_arrays(np.sort(rng.uniform(0, 3, n)), rng.random(n), rng.random(n),
                                   mark=rng.uniform(0, 2, n))
    family = {"ge": GaussianExponential(0.7, 0.5, 0.02),
              "etas": EtasPowerLaw(0.2, 0.5, 0.05, 1.5, 0.01, 2.0),
              "hist": Histogram(np.array([0, 0.5, 2.0]), np.array([0, 0.1, 0.4]),
                                np.array([[1.0, 0.2], [0.1, 0.05]]))}[fam]
    b = branching_probabilities(IntensityModel(Constant(0.8), family), cat)
    np.testing.assert_allclose(b.row_sums(), 1.0, atol=1e-10)
    assert np.all(b.parent < b.child)


# -- EM -----------------------------------------------------------------------


def test_poisson_data_gives_boundary_theta():
    cat, dom = poisson_catalog(1.0, 500.0, seed=3)
    fit = em_fit(GaussianExponential(0.3, 1.0, 0.01), Constant(2.0), cat, dom)
    nu, theta = fit.model.background.nu, fit.model.triggering.theta
    assert theta < 0.02
    assert nu == pytest.approx(cat.n / dom.volume, rel=0.03)


def test_poisson_only_fit_is_closed_form():
    cat, dom = poisson_catalog(3.0, 50.0, seed=4)
    fit = em_fit(None, Constant(1.0), cat, dom)
    assert fit.model.background.nu == pytest.approx(cat.n / dom.volume, rel=1e-12)
    assert fit.converged


@pytest.fixture(scope="module")
def ge_data():
    model = IntensityModel(Constant(2.0), GaussianExponential(0.5, 1.0, 0.01))
    dom = ObservationDomain.unit_square(150.0)
    return model, simulate(model, dom, SimConfig(seed=9)).catalog, dom


def test_one_iteration_from_truth_does_not_decrease(ge_data):
    model, cat, dom = ge_data
    fit = em_fit(model.triggering, model.background, cat, dom, max_iter=1, accelerate=False)
    assert len(fit.loglik_trace) == 2
    assert fit.loglik_trace[1] >= fit.loglik_trace[0] - 1e-8


@pytest.mark.parametrize("accelerate", [False, True])
def test_trace_monotone_and_recovery(ge_data, accelerate):
    model, cat, dom = ge_data
    fit = em_fit(GaussianExponential(0.2, 3.0, 0.05), Constant(1.0), cat, dom, accelerate=accelerate)
    assert fit.converged
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
    est = fit.model.params()
    np.testing.assert_allclose(est, model.params(), rtol=0.25)


def test_acceleration_reaches_same_optimum(ge_data):
    _, cat, dom = ge_data
    a = em_fit(GaussianExponential(0.2, 3.0, 0.05), Constant(1.0), cat, dom, accelerate=True, tol=1e-8)
    b = em_fit(GaussianExponential(0.2, 3.0, 0.05), Constant(1.0), cat, dom, accelerate=False, tol=1e-8)
    assert a.loglik == pytest.approx(b.loglik, abs=1e-5)
    assert a.iterations <= b.iterations


def test_schoenberg_method_runs(ge_data):
    _, cat, dom = ge_data
    fit = em_fit(GaussianExponential(0.4, 1.0, 0.01), Constant(1.0), cat, dom, method="schoenberg")
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
    assert fit.method == "schoenberg"


def test_etas_fit_monotone():
    model = IntensityModel(Constant(1.0), EtasPowerLaw(0.02, 0.0, 0.02, 1.5, 0.001, 2.0))
    dom = ObservationDomain.unit_square(300.0)
    cat = simulate(model, dom, SimConfig(seed=2)).catalog
    fit = em_fit(EtasPowerLaw(0.05, 0.0, 0.05, 1.8, 0.005, 2.5), Constant(0.5), cat, dom, max_iter=60)
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8 * abs(fit.loglik))
    assert fit.n_free == 6  # nu plus five triggering parameters (alpha unidentified)


def test_grid_background_fit_polygon():
    region = Polygon(np.array([[0, 0], [1, 0], [1, 1], [0.5, 0.6], [0, 1]], float))
    dom = ObservationDomain(region, 200.0)
    bg = GridField(np.array([0, 0.5, 1.0]), np.array([0, 0.5, 1.0]), np.array([[1.0, 3.0], [1.0, 3.0]]))
    model = IntensityModel(bg, GaussianExponential(0.4, 1.0, 0.005))
    cat = simulate(model, dom, SimConfig(seed=5)).catalog
    start = GridField(bg.x_edges, bg.y_edges, np.ones((2, 2)))
    fit = em_fit(GaussianExponential(0.2, 2.0, 0.01), start, cat, dom)
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
    v = fit.model.background.values
    assert v[0, 1] > v[0, 0] and v[1, 1] > v[1, 0]


def test_max_iter_zero_returns_start(ge_data):
    model, cat, dom = ge_data
    fit = em_fit(model.triggering, model.background, cat, dom, max_iter=0)
    assert not fit.converged and fit.iterations == 0
    np.testing.assert_array_equal(fit.model.params(), model.params())
    assert fit.loglik == pytest.approx(log_likelihood(model, cat, dom))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_em_monotone_property(seed):
    model = IntensityModel(Constant(5.0), GaussianExponential(0.5, 0.5, 0.005))
    dom = ObservationDomain.unit_square(10.0)
    cat = simulate(model, dom, SimConfig(seed=seed)).catalog
    fit = em_fit(GaussianExponential(0.3, 1.0, 0.02), Constant(1.0), cat, dom, max_iter=50)
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8 * max(1.0, abs(fit.loglik)))


# -- gradient -----------------------------------------------------------------


def test_gradient_matches_finite_differences():
    model = IntensityModel(Constant(2.0), GaussianExponential(0.5, 1.0, 0.01))
    dom = ObservationDomain.unit_square(20.0)
    cat = simulate(model, dom, SimConfig(seed=1)).catalog
    rng = np.random.default_rng(0)
    for _ in range(10):
        theta = model.params() * rng.uniform(0.7, 1.3, 4)
        m = model.with_params(theta)
        grad = log_likelihood_gradient(m, cat, dom)
        fd = np.empty(4)
        for k in range(4):
            h = 1e-4 * theta[k]
            e = np.zeros(4)
            e[k] = h
            # five-point stencil as the independent reference
            f = [log_likelihood(m.with_params(theta + j * e), cat, dom) for j in (-2, -1, 1, 2)]
            fd[k] = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-6 * np.max(np.abs(fd)))


# -- KDE backgrounds ----------------------------------------------------------


@pytest.mark.parametrize("n_p", [9, 101])
def test_n_p_bounds(n_p):
    with pytest.raises(ValueError, match="n_p"):
        adaptive_bandwidths(np.random.random(200), np.random.random(200), n_p)


def test_adaptive_bandwidth_is_kth_neighbour_distance():
    x = np.arange(12.0)
    y = np.zeros(12)
    bw = adaptive_bandwidths(x, y, 10)
    # nearest 10 others of the end point are 1..10 away
    assert bw[0] == 10.0


@pytest.fixture(scope="module")
def flat_data():
    # about 2000 events, a fifth of them triggered
    model = IntensityModel(Constant(3.2), GaussianExponential(0.2, 1.0, 1e-3))
    dom = ObservationDomain.unit_square(500.0)
    return simulate(model, dom, SimConfig(seed=1)).catalog, dom


def test_semiparametric_flat_background(flat_data):
    cat, dom = flat_data
    res = semiparametric_fit(GaussianExponential(0.3, 2.0, 0.02), cat, dom)
    g = np.linspace(0.1, 0.9, 30)
    gx, gy = np.meshgrid(g, g)
    mu = res.background.value(gx, gy)
    assert np.std(mu) / np.mean(mu) < 0.2
    # level recovered, not drained into triggering
    assert res.background.integral(dom.region) == pytest.approx(3.2, rel=0.1)
    assert res.fit.model.triggering.theta == pytest.approx(0.2, abs=0.06)
    assert np.all(np.diff(res.fit.loglik_trace) >= -1e-8)


def test_semiparametric_all_background():
    cat, dom = poisson_catalog(4.0, 100.0, seed=8)
    # mu = 1 is a quarter of this catalog's rate, so start from the data rate
    res = semiparametric_fit(GaussianExponential(0.01, 1.0, 0.01), cat, dom, init="data")
    assert res.fit.branching.p_background.sum() == pytest.approx(cat.n, rel=0.02)


def test_flp_increment_closed_form():
    nu = 3.0
    cat, dom = poisson_catalog(nu, 5.0, seed=2)
    d = flp_increments(IntensityModel(Constant(nu)), cat, dom)
    k1 = cat.n // 2
    want = math.log(nu) - nu * np.diff(cat.t)[k1 - 1:] * dom.area
    np.testing.assert_allclose(d, want, rtol=1e-13)


def test_flp_four_events_two_increments():
    cat = EventCatalog.from_arrays([0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.4], [0.5] * 4)
    assert flp_increments(IntensityModel(Constant(1.0)), cat, UNIT).size == 2


def test_flp_bandwidth_bounded_away_from_zero(flat_data):
    cat, dom = flat_data
    w = np.ones(cat.n)
    # the in-sample likelihood keeps growing as h shrinks; FLP does not
    ins = [np.sum(np.log(WeightedKde(cat.xy, w, h, dom.t_end).value(cat.x, cat.y))) for h in (1e-3, 1e-4)]
    assert ins[1] > ins[0]
    assert flp_score(1e-4, w, cat, dom) < flp_score(0.1, w, cat, dom)
    res = flp_fit(GaussianExponential(0.3, 2.0, 0.02), cat, dom)
    assert res.bandwidth > 0.01
