import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from folialab.errors import ConfigError
from folialab.local_model import (LeafCoord, LinearSingularity, angular_domain, exit_projection, exit_v0,
                                  holonomy_log_derivative, leaf_point, leaf_points, rho, rho_of_u,
                                  sector_metric_checks, separatrix_loop, two_leaf_holonomy)

S = LinearSingularity(1, 1 + 1j)
JOU = LinearSingularity(complex(2, -math.sqrt(3)), complex(2, math.sqrt(3)))


def u_in(dom, r_lo=0.1, r_hi=5.0):
    return st.builds(lambda r, f: r * cmath.exp(1j * (dom.lo + f * dom.opening)),
                     st.floats(r_lo, r_hi), st.floats(0.02, 0.98))


def test_leaf_point_values():
    assert leaf_point(S, LeafCoord(1, 1, 0)) == (1, 1)
    x, y = leaf_point(S, LeafCoord(1, 1, -1))
    assert abs(x - math.exp(-1)) < 1e-15
    assert abs(y - cmath.exp(-1 - 1j)) < 1e-15


def test_leaf_point_checks():
    with pytest.raises(ConfigError):
        leaf_point(S, LeafCoord(1, 1, 1.0))
    with pytest.raises(ConfigError):
        LeafCoord(2, 1, 0)
    with pytest.raises(ConfigError):
        LinearSingularity(-1, 1)


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_modulus_identity(re, im):
    u = complex(re, im)
    x, y = leaf_points(S, u)
    assert abs(math.log(abs(x)) - (S.a * u).real) < 1e-12
    assert abs(math.log(abs(y)) - (S.b * u).real) < 1e-12


def test_angular_domains():
    half = angular_domain(LinearSingularity(1, 1))
    assert half.opening == pytest.approx(math.pi)
    dom = angular_domain(S)
    # Re(u) < 0 and Re((1 + i) u) < 0 intersect in arg u in (pi/2, 5 pi/4)
    assert (dom.lo, dom.hi) == pytest.approx((math.pi / 2, 5 * math.pi / 4))
    outside = cmath.exp(1.4j * math.pi)
    assert abs(leaf_points(S, outside)[1]) > 1 and not dom.contains(outside)
    assert dom.opening == pytest.approx(3 * math.pi / 4)
    j = angular_domain(JOU)
    assert j.opening < math.pi
    assert j.bisector == pytest.approx(math.pi)


@settings(max_examples=60, deadline=None)
@given(u_in(angular_domain(S)))
def test_domain_points_stay_in_bidisc(u):
    x, y = leaf_points(S, u)
    assert abs(x) < 1 and abs(y) < 1


def test_rho_values():
    assert rho((1, 0)) == 0
    assert rho((math.exp(-1), 0)) == pytest.approx(2)
    with pytest.raises(ConfigError):
        rho((0, 0))


@settings(max_examples=40, deadline=None)
@given(u_in(angular_domain(S), 0.1, 20))
def test_rho_of_u_matches_rho(u):
    assert abs(rho_of_u(S, u) - rho(leaf_points(S, u))) < 1e-9


def test_exit_projection_values():
    s = LinearSingularity(1, 1)
    e = exit_projection(s, LeafCoord(1, 1, -2))
    assert e.v0 == pytest.approx(0)
    assert e.point == pytest.approx((1, 1))


@settings(max_examples=40, deadline=None)
@given(u_in(angular_domain(S)))
def test_exit_projection_monotone(u):
    e = exit_projection(S, LeafCoord(1, 1, u))
    z = np.linspace(0, 1, 50)
    x, y = e.path(z)
    m = np.maximum(np.abs(x), np.abs(y))
    assert np.all(np.diff(m) > 0)
    assert abs(m[-1] - 1) < 1e-12


def test_exit_on_boundary_is_fixed():
    u = complex(exit_v0(S, -1 - 2j), -2)
    e = exit_projection(S, LeafCoord(1, 1, u))
    assert e.v0 == pytest.approx(u.real)
    assert e.u_exit == pytest.approx(u)


def test_holonomy_constant_path_and_loop():
    dom = angular_domain(S)
    u0 = 2 * cmath.exp(1j * dom.bisector)
    assert holonomy_log_derivative(S, u0, u0) == 0
    loop = separatrix_loop(S)
    assert ((S.a + S.b) * loop).real == pytest.approx(-2 * math.pi, abs=1e-12)
    assert math.exp(((S.a + S.b) * loop).real) == pytest.approx(1.8674e-3, rel=1e-4)


@settings(max_examples=40, deadline=None)
@given(u_in(angular_domain(S)), u_in(angular_domain(S)), u_in(angular_domain(S)))
def test_holonomy_additivity(u0, u1, u2):
    whole = holonomy_log_derivative(S, u0, u2, path=[u0, u1, u2])
    parts = holonomy_log_derivative(S, u0, u1) + holonomy_log_derivative(S, u1, u2)
    assert abs(whole - parts) < 1e-12


def test_holonomy_path_checks():
    with pytest.raises(ConfigError):
        holonomy_log_derivative(S, -1, -2, path=[-1, -3])
    with pytest.raises(ConfigError):
        holonomy_log_derivative(S, -1, 1)


def test_loop_matches_two_leaf_oracle():
    dom = angular_domain(S)
    u0 = 3 * cmath.exp(1j * dom.bisector)
    res = two_leaf_holonomy(S, u0, separatrix_loop(S))
    assert abs(res["log_derivative"] / (-2 * math.pi) - 1) < 1e-6
    # the multiplier in y is e^{2 pi i b/a} times the metric correction
    assert abs(abs(res["multiplier"]) - math.exp(-2 * math.pi)) < 1e-6 * math.exp(-2 * math.pi)


@settings(max_examples=10, deadline=None)
@given(u_in(angular_domain(S), 0.5, 3), st.floats(-1, 1), st.floats(-1, 1))
def test_two_leaf_matches_closed_form(u0, dr, di):
    du = complex(dr, di)
    res = two_leaf_holonomy(S, u0, du)
    assert abs(res["log_derivative"] - ((S.a + S.b) * du).real) < 1e-6


def test_sector_metric_ratios():
    res = sector_metric_checks(S, n_samples=60, seed=1)
    assert np.all(np.abs(np.array(res["ratio_poincare_log_bisector"])[-3:] - 1) < 0.1)
    assert res["ratio_rho_euclid"]["C"] <= 4
    assert res["ratio_density_rho"]["C"] < 10
    with pytest.raises(ConfigError):
        sector_metric_checks(S, n_samples=3)
