import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepp.catalog import EventCatalog, ObservationDomain
from sepp.decluster import (
    default_bins, generations, misd_fit, sample_family_tree, thin_to_background,
)
from sepp.fit_em import BranchingMatrix, branching_probabilities
from sepp.intensity import Constant, GaussianExponential, Histogram, IntensityModel
from sepp.simulate import SimConfig, simulate


def bm(p0, pairs):
    """BranchingMatrix from p0 and (child, parent, prob) triples."""
    pairs = sorted(pairs)
    c = np.array([a for a, _, _ in pairs], np.int64)
    p = np.array([b for _, b, _ in pairs], np.int64)
    w = np.array([v for _, _, v in pairs], float)
    return BranchingMatrix(np.asarray(p0, float), c, p, w)


@pytest.fixture(scope="module")
def fitted():
    model = IntensityModel(Constant(4.0), GaussianExponential(0.5, 1.0, 1e-3))
    dom = ObservationDomain.unit_square(40.0)
    cat = simulate(model, dom, SimConfig(seed=3, pad_time=0.0, pad_space=0.0)).catalog
    return cat, branching_probabilities(model, cat)


# -- thinning -------------------------------------------------------------------


@pytest.mark.parametrize("p, kept", [(1.0, 5), (0.0, 0)])
def test_thin_extremes(p, kept):
    d = thin_to_background(bm(np.full(5, p), []), seed=1)
    assert d.retained.size == kept


def test_thin_mean_count_binomial(fitted):
    _, br = fitted
    p = br.p_background
    counts = np.array([thin_to_background(br, seed=s).retained.size for s in range(1000)])
    se = math.sqrt(np.sum(p * (1 - p)) / counts.size)
    assert abs(counts.mean() - p.sum()) < 3 * se


def test_thin_per_event_frequencies(fitted):
    _, br = fitted
    p = br.p_background
    freq = np.mean([thin_to_background(br, seed=s).background for s in range(1000)], axis=0)
    z = np.abs(freq - p) / np.sqrt(np.maximum(p * (1 - p), 1e-12) / 1000)
    # Bonferroni-sized bound over a few hundred events
    assert np.all((z < 4.5) | (p * (1 - p) < 1e-9))


def test_thin_is_seeded(fitted):
    _, br = fitted
    a = thin_to_background(br, seed=7).background
    np.testing.assert_array_equal(a, thin_to_background(br, seed=7).background)


def test_declustering_csv_partitions(tmp_path, fitted):
    _, br = fitted
    d = thin_to_background(br, seed=0)
    d.write_csv(tmp_path / "d.csv")
    rows = list(csv.DictReader((tmp_path / "d.csv").open()))
    assert len(rows) == br.n
    assert {r["label"] for r in rows} <= {"background", "triggered"}
    assert sum(r["label"] == "background" for r in rows) == d.retained.size


# -- family trees ---------------------------------------------------------------


def test_two_event_tree():
    tree = sample_family_tree(bm([1.0, 0.0], [(1, 0, 1.0)]), seed=0)
    assert list(tree.parent) == [-1, 0]
    assert list(tree.generation) == [0, 1]


def test_all_background_is_singleton_forest():
    tree = sample_family_tree(bm(np.ones(6), []), seed=0)
    assert np.all(tree.parent == -1) and np.all(tree.generation == 0)


def test_parent_frequencies_multinomial():
    probs = {-1: 0.2, 0: 0.5, 1: 0.3}
    br = bm([1.0, 1.0, 0.2], [(2, 0, 0.5), (2, 1, 0.3)])
    draws = np.array([sample_family_tree(br, seed=s).parent[2] for s in range(10_000)])
    for j, p in probs.items():
        f = np.mean(draws == j)
        assert abs(f - p) < 3 * math.sqrt(p * (1 - p) / draws.size)


def test_selection_rule_matches_uniform_draw():
    # same seed, same uniforms: background iff R < p0, else smallest J exceeding R
    br = bm([1.0, 1.0, 1.0, 0.1], [(3, 0, 0.3), (3, 1, 0.4), (3, 2, 0.2)])
    for s in range(50):
        r = np.random.default_rng(s).random(4)[3]
        cum = np.array([0.1, 0.4, 0.8, 1.0])
        want = -1 if r < 0.1 else int(np.searchsorted(cum[1:], r, side="right"))
        assert sample_family_tree(br, seed=s).parent[3] == want


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_sampled_tree_is_acyclic(fitted, seed):
    _, br = fitted
    tree = sample_family_tree(br, seed=seed)
    tree.validate()
    # following parents always terminates at a root
    for i in range(tree.parent.size):
        k, steps = i, 0
        while tree.parent[k] >= 0:
            k = tree.parent[k]
            steps += 1
        assert steps == tree.generation[i]


def test_generations_chain():
    assert list(generations(np.array([-1, 0, 1, -1, 3]))) == [0, 1, 2, 0, 1]


def test_tree_csv(tmp_path, fitted):
    _, br = fitted
    tree = sample_family_tree(br, seed=2)
    tree.write_csv(tmp_path / "t.csv")
    rows = list(csv.DictReader((tmp_path / "t.csv").open()))
    assert [int(r["parent"]) for r in rows] == list(tree.parent)


# -- MISD -----------------------------------------------------------------------


def test_default_bins_shape_and_order():
    rng = np.random.default_rng(0)
    cat = EventCatalog.from_arrays(np.sort(rng.uniform(0, 10, 300)), rng.random(300), rng.random(300))
    te, re = default_bins(cat)
    assert te.size == 11 and re.size == 9
    assert te[0] == re[0] == 0.0
    assert np.all(np.diff(te) > 0) and np.all(np.diff(re) > 0)


@pytest.fixture(scope="module")
def poisson_misd():
    dom = ObservationDomain.unit_square(100.0)
    cat = simulate(IntensityModel(Constant(5.0)), dom, SimConfig(seed=4)).catalog
    te = np.array([0.0, 0.5, 1.0, 2.0, 4.0])
    re = np.array([0.0, 0.02, 0.05, 0.1])
    return cat, dom, misd_fit(cat, dom, te, re, max_iter=300)


def test_misd_on_poisson_data(poisson_misd):
    cat, dom, res = poisson_misd
    # null pair count per cell is about n nu |cell|, so each cell's mass has
    # SD near sqrt(n nu |cell|) / n; positive parts of the noise sum to less
    h = res.histogram
    meas = np.diff(h.time_edges)[:, None] * np.pi * np.diff(h.radius_edges ** 2)[None, :]
    nu = cat.n / (dom.area * dom.t_end)
    assert res.total_mass < float(np.sum(np.sqrt(cat.n * nu * meas))) / cat.n
    assert res.background.nu == pytest.approx(nu, rel=0.1)
    # background and triggering share the events: nu |X| T + n m = n, up to edge loss
    assert res.background.nu * dom.area * dom.t_end + cat.n * res.total_mass == pytest.approx(
        cat.n, rel=0.01)
    assert res.branching.expected_background() == pytest.approx(
        res.background.nu * dom.area * dom.t_end, rel=1e-6)


def test_misd_trace_non_decreasing(poisson_misd):
    _, _, res = poisson_misd
    assert np.all(np.diff(res.fit.loglik_trace) >= -1e-8 * np.abs(res.fit.loglik_trace[1:]))


def test_misd_support_and_mass(poisson_misd):
    _, _, res = poisson_misd
    assert res.support == (4.0, 0.1)
    h = res.histogram
    meas = np.diff(h.time_edges)[:, None] * np.pi * np.diff(h.radius_edges ** 2)[None, :]
    assert res.total_mass == pytest.approx(float(np.sum(h.cell_values * meas)), rel=1e-12)


def test_misd_recovers_strong_cell():
    te = np.array([0.0, 0.5, 2.0])
    re = np.array([0.0, 0.03, 0.1])
    meas = np.diff(te)[:, None] * np.pi * np.diff(re ** 2)[None, :]
    mass = np.array([[0.3, 0.05], [0.1, 0.05]])
    truth = Histogram(te, re, mass / meas)
    dom = ObservationDomain.unit_square(300.0)
    cat = simulate(IntensityModel(Constant(3.0), truth), dom,
                   SimConfig(seed=6, pad_time=0.0, pad_space=0.0)).catalog
    res = misd_fit(cat, dom, te, re, max_iter=400)
    assert res.total_mass == pytest.approx(0.5, abs=0.08)
    got = res.histogram.cell_values * meas
    assert got[0, 0] == pytest.approx(0.3, rel=0.25)


def test_misd_grid_background_and_empty_cells():
    dom = ObservationDomain.unit_square(50.0)
    cat = simulate(IntensityModel(Constant(4.0)), dom, SimConfig(seed=8)).catalog
    # a far annulus with a tiny lag window stays empty
    te = np.array([0.0, 1e-9, 1.0])
    re = np.array([0.0, 0.05, 0.1])
    res = misd_fit(cat, dom, te, re, background="grid", grid_shape=(2, 2), max_iter=200)
    assert res.background.values.shape == (2, 2)
    assert res.fit.empty_cells == [tuple(c) for c in np.argwhere(res.histogram.cell_values == 0)]


def test_misd_rejects_unknown_background():
    cat = EventCatalog.from_arrays([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        misd_fit(cat, ObservationDomain.unit_square(1.0), [0.0, 1.0], [0.0, 1.0], background="kde")
