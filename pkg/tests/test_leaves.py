import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from folialab import leaves as lv
from folialab.errors import ConfigError, NumericalError
from folialab.geometry import ProjPoint, eigen_data, jouanolou, lift, linear_spec, to_chart
from folialab.local_model import LinearSingularity, holonomy_log_derivative, separatrix_loop as local_loop

LIN = linear_spec(1, 1 + 1j)


@pytest.fixture(scope="module")
def cov():
    return lv.build_covering(jouanolou(2), calibrate=False)


@pytest.fixture(scope="module")
def lin_cov():
    sd = eigen_data(LIN, ProjPoint([0, 0, 1]))
    c = lv.Covering(LIN, sings=[sd])
    lv.estimate_constants(c, n=100)
    return c


@pytest.fixture(scope="module")
def germ_case(cov):
    w = lv.random_regular_points(cov, 1, seed=5)[0]
    lp = lv.continue_leaf(cov.spec, ProjPoint(w), [0, 0.6, 0.6 + 0.5j])
    return lp, lv.holonomy_germ(cov, lp)


@pytest.fixture(scope="module")
def bm_traces(cov):
    w0 = lv.random_regular_points(cov, 60, seed=8)
    bm = lv.leaf_bm(cov.spec, w0, 1.0, 5e-4, seed=9, record=True)
    return np.transpose(bm.trace, (1, 0, 2))


def test_empty_time_path():
    p = ProjPoint([0.3, -0.2j, 1])
    lp = lv.continue_leaf(jouanolou(2), p, [])
    assert lp.trace.shape == (1, 3)
    assert ProjPoint(lp.trace[0]).close_to(p, 1e-15)
    assert lp.duration == 0 and lp.gs_length() == 0


@pytest.mark.parametrize("T", [3, 3j, -2 + 2j, -3, 1.5 - 2.5j])
def test_linear_flow_matches_closed_form(T):
    z0 = np.array([0.3 + 0.1j, -0.2 + 0.25j])
    lp = lv.continue_leaf(LIN, ProjPoint(lift(2, z0)), [0, T], handoff=False)
    exact = lift(2, z0 * np.exp(np.array([1, 1 + 1j]) * T))
    assert lp.end.distance(ProjPoint(exact)) < 1e-9


def test_linear_flow_trace_of_jacobian():
    # pinned to Z = 1, the accumulated tr DV du is (a + b) u
    z0 = np.array([0.3, 0.2])
    T = -1 + 0.5j
    lp = lv.continue_leaf(LIN, ProjPoint(lift(2, z0)), [0, T], chart=2, handoff=False)
    assert abs(lp.eta[-1] - (2 + 1j) * T) < 1e-9
    assert lp.cocycle("eta_m") == pytest.approx(((2 + 1j) * T).real, abs=1e-9)
    with pytest.raises(ConfigError):
        lp.cocycle("beta")


def test_handoff_agrees_with_integrator():
    p = ProjPoint([0.3, 0.2, 1])
    a = lv.continue_leaf(LIN, p, [0, -1 + 2j])
    b = lv.continue_leaf(LIN, p, [0, -1 + 2j], handoff=False)
    assert a.end.distance(b.end) < 1e-9


@settings(max_examples=8, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.integers(0, 10_000))
def test_homotopic_paths_same_endpoint(dr, di, seed):
    spec = jouanolou(2)
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3) + 1j * rng.normal(size=3)
    p = ProjPoint(w)
    end = 0.4 + 0.3j
    direct = lv.continue_leaf(spec, p, [0, end], chart=p.chart)
    detour = lv.continue_leaf(spec, p, [0, complex(dr, di), end], chart=p.chart)
    assert direct.end.distance(detour.end) < 1e-9


def test_reversal_identity():
    spec = jouanolou(2)
    p = ProjPoint([0.2 + 0.1j, -0.4, 1])
    tp = np.array([0, 0.3, 0.3 + 0.4j, 0.1 + 0.5j])
    lp = lv.continue_leaf(spec, p, tp, chart=2)
    back = lv.continue_leaf(spec, lp.end, tp[::-1] - tp[-1], chart=2)
    assert back.end.distance(p) < 1e-8
    assert back.cocycle("eta_m") == pytest.approx(-lp.cocycle("eta_m"), abs=1e-8)
    rev = lp.reversed()
    assert rev.end.distance(p) < 1e-12
    assert rev.cocycle("eta_m") == pytest.approx(-lp.cocycle("eta_m"), abs=1e-12)
    assert rev.gs_length() == pytest.approx(lp.gs_length())


def test_start_checks():
    with pytest.raises(ConfigError):
        lv.continue_leaf(jouanolou(2), ProjPoint([1, 1, 1]), [0, 1])
    with pytest.raises(ConfigError):
        lv.continue_leaf(jouanolou(2), ProjPoint([1, 0.5, 0]), [0, 1], chart=2)


def test_excluded_ball_raises(lin_cov):
    with pytest.raises(NumericalError):
        lv.continue_leaf(LIN, ProjPoint([0.3, 0.3, 1]), [0, -20], covering=lin_cov)
    with pytest.raises(NumericalError):
        lv.continue_leaf(LIN, ProjPoint([0.3, 0.3, 1]), [0, -20], covering=lin_cov, handoff=False)


def test_coverage(cov):
    res = lv.coverage_test(cov, 100_000, seed=3)
    assert res["uncovered"] == 0


def test_constants_reported(cov):
    assert cov.delta0 > 0
    assert math.isfinite(cov.theta) and cov.theta > 0
    assert cov.rho0 > 0
    d = cov.to_dict()
    assert {"delta0", "theta", "rho0"} <= set(d)


def test_projection_leaves_singular_regions(cov):
    # points just inside a singular region are pushed out along the leaf
    sd = cov.sings[0]
    E = cov._E[0]
    z = sd.coords() + E @ np.array([0.3, 0.2]) * cov._rlin[0]
    w = lv.normalize(lift(sd.chart, z))[None]
    assert cov.singular_index(w)[0] == 0
    wp, _, _ = cov.project(w)
    assert cov.singular_index(wp)[0] == -1
    keys = cov.cell_keys(wp)
    assert cov.contains(keys[0], wp)[0]


def test_trivial_germ(cov):
    w = lv.random_regular_points(cov, 1, seed=5)[0]
    key = cov.cell_keys(w[None])[0]
    b = cov.box(key)
    c = lift(b.chart, b.center)
    lp = lv.continue_leaf(cov.spec, ProjPoint(c), [0, 0.1 * b.plaque_radius / b.speed])
    g = lv.holonomy_germ(cov, lp)
    assert abs(g.derivative - 1) < 1e-12
    assert g.guaranteed_radius == pytest.approx(b.transverse_radius)
    assert lv.crossing_count(cov, lp) == 0


def test_germ_value_matches_direct_tracking(cov, germ_case):
    lp, g = germ_case
    v = lv.germ_evaluate(cov, lp, g, g.start_value)
    assert abs(v - g.value) < 1e-8


def test_germ_radii_monotone(germ_case):
    _, g = germ_case
    assert len(g.radii) > 1
    assert np.all(np.diff(g.radii) <= 0)
    assert 0 < g.guaranteed_radius <= g.radii[-1]


def test_germ_distortion(cov, germ_case):
    lp, g = germ_case
    rng = np.random.default_rng(4)
    rad = g.guaranteed_radius
    h = 1e-3 * rad
    for _ in range(100):
        t = g.start_value + rad * math.sqrt(rng.random()) * cmath.exp(2j * math.pi * rng.random())
        d = (lv.germ_evaluate(cov, lp, g, t + h) - lv.germ_evaluate(cov, lp, g, t - h)) / (2 * h)
        ratio = abs(d / g.derivative)
        assert math.exp(-g.epsilon) <= ratio <= math.exp(g.epsilon)


def test_koebe_radius():
    r = lv.koebe_radius(0.1)
    assert 0 < r < 1
    assert (1 + r) / (1 - r) ** 3 <= math.exp(0.1) + 1e-12


def test_linear_loop_matches_local_model(lin_cov):
    res = lv.separatrix_loop(lin_cov, 0)
    s = LinearSingularity(1, 1 + 1j)
    loop = local_loop(s)
    # the local formula along the segment u0 -> u0 + 2 pi i / a inside the angular domain
    expected = math.exp(((s.a + s.b) * loop).real)
    assert abs(abs(res["derivative"]) / expected - 1) < 1e-6
    u0 = -3.0
    assert holonomy_log_derivative(s, u0, u0 + loop) == pytest.approx(math.log(expected))


def test_loop_eta_equals_log_multiplier(cov):
    res = lv.separatrix_loop(cov, 0)
    assert res["relative_error"] < 1e-3
    assert res["closure"] < 1e-9
    assert res["path"].cocycle("eta_m") == pytest.approx(math.log(abs(res["expected"])), abs=1e-8)


def test_crossing_inside_one_box_and_concatenation(cov, bm_traces):
    whole = lv.crossing_counts(cov, bm_traces)
    m = bm_traces.shape[1] // 2
    first = lv.crossing_counts(cov, bm_traces[:, :m + 1])
    second = lv.crossing_counts(cov, bm_traces[:, m:])
    assert np.all(whole <= first + second + 1)
    assert np.all(whole >= 0)


def test_minimal_runs_are_valid_and_beat_greedy(cov, bm_traces):
    greedy = lv.itineraries(cov, bm_traces[:10])
    for tr, g in zip(bm_traces[:10], greedy):
        wp, _, _ = cov.project(tr)
        runs = lv.minimal_runs(cov, wp)
        assert runs[0][1] == 0 and runs[-1][2] == len(wp) - 1
        assert all(r[1] == q[2] + 1 for q, r in zip(runs, runs[1:]))
        assert all(cov.contains(k, wp[a:b + 1]).all() for k, a, b in runs)
        assert len(runs) <= len(g)


def test_poincare_clock_length():
    cov_ = lv.Covering(jouanolou(2))
    w0 = lv.random_regular_points(cov_, 200, seed=1)
    a = lv.leaf_bm(cov_.spec, w0, 1.0, 2e-3, seed=2, clock="poincare")
    # each step has hyperbolic length sqrt(2 dt) |N1 + i N2|
    assert a.poincare_length.mean() == pytest.approx(math.sqrt(math.pi / 2e-3), rel=0.01)
    with pytest.raises(ConfigError):
        lv.leaf_bm(cov_.spec, w0, 1.0, 2e-3, clock="wall")


def test_leaf_bm_length_and_reproducibility(cov):
    w0 = lv.random_regular_points(cov, 200, seed=1)
    a = lv.leaf_bm(cov.spec, w0, 1.0, 5e-4, seed=2)
    b = lv.leaf_bm(cov.spec, w0, 1.0, 5e-4, seed=2)
    assert np.array_equal(a.end, b.end)
    # E sum |du| = (t / dt) sqrt(2 dt) sqrt(pi / 2)
    assert a.gs_length.mean() == pytest.approx(math.sqrt(math.pi / 5e-4), rel=0.01)
    assert not a.excluded.any()


def test_taylor_radius():
    big = lv.taylor_radius(LIN, np.array([2]), np.array([[0.3, 0.3]]))
    small = lv.taylor_radius(jouanolou(2), np.array([2]), np.array([[0.3, 0.3]]))
    assert big[0] > 5 * small[0] > 0


def test_rho_value_outside_regions(cov):
    w = lv.random_regular_points(cov, 500, seed=6)
    assert np.all(lv.rho_value(cov, w) == 1.0)


def test_global_lyapunov_report_fields():
    rep = lv.global_lyapunov(t=1.0, N=16, seed=1)
    d = rep.to_dict()
    assert d["target"] == -4
    assert {"band95", "negative_95", "approximate"} <= set(d)
    assert math.isfinite(rep.estimate)
