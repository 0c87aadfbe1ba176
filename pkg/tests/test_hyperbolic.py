import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from folialab.errors import ConfigError, NumericalError, ToleranceError
from folialab.hyperbolic import (HypPoint, StepControl, disc, distance_array, dynkin_check, endpoint_radii,
                                 endpoints, heat_kernel, hyp_distance, kernel_mass, kernel_oracle,
                                 log_heat_kernel, log_heat_kernel_gl, mobius_disc, plane_entropy, poincare_density,
                                 radial_sde_drift, sample_bm)

in_disc = st.builds(lambda r, a: r * complex(math.cos(a), math.sin(a)),
                    st.floats(0, 0.95), st.floats(0, 2 * math.pi))

# log p(t, r) from an independent 30-digit evaluation of the McKean integral
# with the cosh difference written as 2 sinh((s + r)/2) sinh((s - r)/2)
MCKEAN_LOG = [
    (0.5, 0.0, -2.0020657699606238),
    (0.5, 1.0, -2.5806237774892765),
    (1.0, 0.1, -2.8586407265039002),
    (1.0, 3.0, -5.6866419171502805),
    (2.0, 2.0, -4.6372243463111256),
    (5.0, 8.0, -11.329156551287953),
    (10.0, 12.0, -15.515496481617729),
]


def test_density_values():
    assert poincare_density(disc(0)) == pytest.approx(2.0)
    assert poincare_density(HypPoint("half-plane", 1j)) == pytest.approx(1.0)
    # sector of opening pi is the right half-plane: distance 1 from the edge
    assert poincare_density(HypPoint("sector", 1.0, math.pi)) == pytest.approx(1.0)


def test_bad_points():
    with pytest.raises(ConfigError):
        disc(1.0)
    with pytest.raises(ConfigError):
        HypPoint("half-plane", -1j)
    with pytest.raises(ConfigError):
        HypPoint("sector", 1.0)
    with pytest.raises(ConfigError):
        hyp_distance(disc(0), HypPoint("half-plane", 1j))


def test_distance_values():
    assert hyp_distance(disc(0), disc(0)) == 0
    assert hyp_distance(disc(0), disc(0.5)) == pytest.approx(math.log(3), rel=1e-14)


@settings(max_examples=80, deadline=None)
@given(in_disc, in_disc, st.floats(0, 2 * math.pi))
def test_rotation_invariance(z, w, th):
    e = complex(math.cos(th), math.sin(th))
    d1 = distance_array("disc", z, w)
    d2 = distance_array("disc", e * z, e * w)
    assert abs(d1 - d2) <= 1e-9 * max(1, d1)


@settings(max_examples=80, deadline=None)
@given(in_disc, in_disc, in_disc)
def test_isometry_and_triangle(z, w, a):
    d = distance_array("disc", z, w)
    assert abs(distance_array("disc", mobius_disc(z, a), mobius_disc(w, a)) - d) <= 1e-8 * max(1, d)
    v = 0.3 * a
    assert d <= distance_array("disc", z, v) + distance_array("disc", v, w) + 1e-9


@settings(max_examples=40, deadline=None)
@given(in_disc, in_disc)
def test_models_agree(z, w):
    h = lambda q: 1j * (1 + q) / (1 - q)
    assert abs(distance_array("half-plane", h(z), h(w)) - distance_array("disc", z, w)) < 1e-7


def test_sample_bm_zero_time():
    p = sample_bm(disc(0.2), 0.0)
    assert len(p.samples) == 1 and p.samples[0] == (0.0, 0.2 + 0j)


def test_sample_bm_path_fields(tmp_path):
    p = sample_bm(HypPoint("half-plane", 1j), 1.0, StepControl(dt=0.01), seed=3)
    assert p.times[0] == 0 and np.all(np.diff(p.times) > 0)
    assert np.all(p.coordinates.imag > 0)
    steps = distance_array("half-plane", p.coordinates[:-1], p.coordinates[1:])
    assert steps.max() <= p.step_control.cap
    f = tmp_path / "bm.csv"
    p.to_csv(f)
    lines = f.read_text().splitlines()
    assert lines[0] == "time,re,im" and len(lines) == len(p.samples) + 1


def test_sample_bm_reproducible():
    a = sample_bm(disc(0), 0.5, seed=11).coordinates
    b = sample_bm(disc(0), 0.5, seed=11).coordinates
    assert np.array_equal(a, b)


def test_radial_drift_matches_sde_oracle():
    mc = endpoint_radii(10.0, 100_000, seed=1).mean() / 10
    oracle = radial_sde_drift(10.0, 4000, seed=2)
    assert abs(mc - oracle) < 0.05


def test_asymptotic_radial_speed_is_one():
    r = endpoint_radii(20.0, 20_000, seed=4, checkpoints=(10.0,))
    speed = (r[20.0].mean() - r[10.0].mean()) / 10
    assert abs(speed - 1) < 0.05


def test_endpoint_angles_uniform():
    _, phi = endpoints(2.0, 20_000, seed=5)
    counts, _ = np.histogram(np.mod(phi, 2 * np.pi), bins=16, range=(0, 2 * np.pi))
    assert stats.chisquare(counts).pvalue > 1e-3


@pytest.mark.parametrize("t", [0.5, 2.0, 10.0])
def test_kernel_mass(t):
    assert abs(kernel_mass(t) - 1) < 1e-6


@pytest.mark.parametrize("t,r,expected", MCKEAN_LOG)
def test_kernel_matches_high_precision_oracle(t, r, expected):
    assert abs(log_heat_kernel(t, r) - expected) < 1e-9
    assert abs(log_heat_kernel_gl(t, [r])[0] - expected) < 1e-8


def test_kernel_decreasing():
    for t in (0.3, 2.0, 15.0):
        v = log_heat_kernel_gl(t, np.linspace(0, t + 20, 400))
        assert np.all(np.diff(v) < 0)


def test_kernel_errors():
    with pytest.raises(ConfigError):
        heat_kernel(0.0, 1.0)
    with pytest.raises(ConfigError):
        heat_kernel(1.0, -1.0)
    with pytest.raises(NumericalError):
        kernel_oracle(1.0).log_p(1e4)


def test_semigroup_property():
    # int p(1, d(x,y)) p(1, d(y,z)) dvol(y) = p(2, d(x,z)), with x = 0 and z at distance 1.5
    o1 = kernel_oracle(1.0)
    dz = 1.5
    zc = math.tanh(dz / 2)

    def inner(r):
        phis = np.linspace(0, 2 * np.pi, 257)[:-1]
        y = math.tanh(r / 2) * np.exp(1j * phis)
        d = distance_array("disc", y, zc)
        return np.exp(o1.log_p(d)).mean() * 2 * np.pi

    val, _ = integrate.quad(lambda r: math.exp(float(o1.log_p(r))) * inner(r) * math.sinh(r), 0, 15, limit=200)
    assert abs(val / heat_kernel(2.0, dz) - 1) < 0.01


def test_radii_law_matches_kernel():
    r = endpoint_radii(2.0, 100_000, seed=2)
    ks = stats.kstest(r, kernel_oracle(2.0).radial_cdf).statistic
    assert ks < 0.01


def test_plane_entropy_trend_and_errors():
    a = plane_entropy(5.0, 20_000, seed=3)
    b = plane_entropy(20.0, 20_000, seed=3)
    assert a.estimate <= b.estimate + 3 * math.hypot(a.stderr, b.stderr)
    with pytest.raises(ConfigError):
        plane_entropy(5.0, 0, seed=1)
    with pytest.raises(ToleranceError):
        plane_entropy(2.0, 100, seed=1, max_stderr=1e-6)


def test_step_halving_consistency():
    a = plane_entropy(8.0, 20_000, seed=9)
    b = plane_entropy(8.0, 20_000, seed=9, step=StepControl().halved())
    assert abs(a.estimate - b.estimate) < 2 * math.hypot(a.stderr, b.stderr)


def test_report_fields():
    rep = plane_entropy(2.0, 500, seed=4)
    d = rep.to_dict()
    assert {"estimate", "stderr", "n", "t", "seed"} <= set(d)
    assert d["n"] == 500 and d["seed"] == 4


def test_dynkin_calibration():
    rep = dynkin_check("log_density", 0j, 1.0, 20_000, seed=6)
    assert abs(rep.estimate - 1) < 0.02
    with pytest.raises(NumericalError):
        dynkin_check("constant", 0j, 1.0, 1000, seed=1)
    with pytest.raises(NumericalError):
        dynkin_check("log_density", 0j, 0.0, 1000, seed=1)
