import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from folialab.errors import ConfigError, NumericalError
from folialab.geometry import (CHART_AXES, FoliationSpec, ProjPoint, change_chart, chart_jacobian, eigen_data,
                               find_singularities, jouanolou, lift, linear_spec, max_chart, normalize_pair,
                               random_spec, singularities, to_chart)

small = st.floats(-2, 2, allow_nan=False)
cplx = st.builds(complex, small, small)


@pytest.fixture(scope="module")
def jsings():
    return singularities(jouanolou(2))


def test_jouanolou_chart_values():
    spec = jouanolou(2)
    v = spec.field(2, np.array([[0, 0], [1, 1]]))
    np.testing.assert_allclose(v[0], [0, 1], atol=1e-15)
    np.testing.assert_allclose(v[1], [0, 0], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(cplx, cplx)
def test_jouanolou_matches_dehomogenized_polynomials(x, y):
    # (y^2 - x^3, 1 - x^2 y) from dehomogenizing (Y^2, Z^2, X^2) at Z = 1
    v = jouanolou(2).field(2, np.array([x, y]))
    np.testing.assert_allclose(v, [y ** 2 - x ** 3, 1 - x ** 2 * y], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(cplx, cplx, st.integers(0, 2), st.integers(0, 2))
def test_chart_roundtrip(x, y, src, dst):
    w = lift(src, np.array([x, y]))
    if abs(w[dst]) < 1e-3:
        return
    back = change_chart(change_chart(np.array([x, y]), src, dst), dst, src)
    np.testing.assert_allclose(back, [x, y], rtol=1e-10, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(cplx, cplx, st.integers(0, 2), st.integers(0, 2))
def test_chart_jacobian_matches_finite_differences(x, y, src, dst):
    z = np.array([x, y])
    w = lift(src, z)
    if abs(w[dst]) < 0.1:
        return
    J = chart_jacobian(z, src, dst)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2, complex)
        e[k] = h
        fd = (change_chart(z + e, src, dst) - change_chart(z - e, src, dst)) / (2 * h)
        np.testing.assert_allclose(J[:, k], fd, rtol=1e-5, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(cplx, min_size=3, max_size=3))
def test_projpoint_normalized_in_max_chart(c):
    if max(abs(v) for v in c) < 1e-3:
        return
    p = ProjPoint(c)
    assert abs(p.array[p.chart] - 1) < 1e-12
    assert np.abs(p.array).max() <= 1 + 1e-12
    q = ProjPoint(np.array(c) * cmath.exp(0.7j) * 3.1)
    assert p.close_to(q, 1e-7)


def test_vector_field_transforms_between_charts():
    # the field is a line field: chart fields agree up to the chart factor
    spec = random_spec(2, seed=5)
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = rng.normal(size=3) + 1j * rng.normal(size=3)
        a, b = 2, 0
        za, zb = to_chart(w, a), to_chart(w, b)
        va = spec.field(a, za)
        vb = spec.field(b, zb)
        pushed = chart_jacobian(za, a, b) @ va
        ratio = pushed / vb
        assert abs(ratio[0] - ratio[1]) < 1e-8 * abs(ratio[0])


def test_text_roundtrip():
    spec = random_spec(3, seed=2)
    again = FoliationSpec.from_text(spec.to_text(), name=spec.name)
    assert again.to_text() == spec.to_text()


def test_bad_spec_text():
    with pytest.raises(ConfigError):
        FoliationSpec.from_text("degree = 2\nP[1,1] = 1\n")


def test_jouanolou_seven_points(jsings):
    assert len(jsings) == 7
    # chart Z = 1 solutions of x^7 = 1, y = 1/x^2
    for s in jsings:
        x, y = s.location.in_chart(2)
        assert abs(x ** 7 - 1) < 1e-10
        assert abs(y - 1 / x ** 2) < 1e-10


def test_singular_in_every_chart(jsings):
    spec = jouanolou(2)
    for s in jsings:
        w = s.location.array
        for c in range(3):
            if abs(w[c]) > 1e-6:
                assert np.abs(spec.field(c, to_chart(w, c))).max() < 1e-9


def test_jouanolou_eigenvalues(jsings):
    target = sorted([complex(2, -math.sqrt(3)), complex(2, math.sqrt(3))], key=lambda z: z.imag)
    for s in jsings:
        got = sorted(s.eigenvalues, key=lambda z: z.imag)
        assert all(abs(g - t) < 1e-9 for g, t in zip(got, target))
        assert s.hyperbolic
        # raw eigenvalues are a common unit multiple of -2 +- i sqrt 3
        raw = np.array(s.raw_eigenvalues)
        assert np.allclose(np.abs(raw), math.sqrt(7), atol=1e-9)
        assert abs(raw.sum() / 4 + 1) < 1e-9 or abs(abs(raw.sum()) - 4) < 1e-9


def test_raw_eigenvalues_at_diagonal_point(jsings):
    s = [s for s in jsings if s.location.close_to(ProjPoint([1, 1, 1]))][0]
    got = sorted(s.raw_eigenvalues, key=lambda z: z.imag)
    assert abs(got[0] - complex(-2, -math.sqrt(3))) < 1e-9
    assert abs(got[1] - complex(-2, math.sqrt(3))) < 1e-9


def test_generic_quadratic_has_seven_points():
    # Bezout-type count d^2 + d + 1
    assert len(find_singularities(random_spec(2, seed=3))) == 7


def test_linear_field_single_affine_point():
    pts = find_singularities(linear_spec(1, 1 + 1j))
    affine = [p for p in pts if abs(p.array[2]) > 1e-9]
    assert len(affine) == 1
    np.testing.assert_allclose(affine[0].in_chart(2), [0, 0], atol=1e-12)


def test_hyperbolicity_flags():
    origin = ProjPoint([0, 0, 1])
    assert eigen_data(linear_spec(1, 1 + 1j), origin).hyperbolic
    assert not eigen_data(linear_spec(1, 2), origin).hyperbolic
    with pytest.raises(NumericalError):
        eigen_data(linear_spec(1, 2), origin, require_hyperbolic=True)


def test_not_singular_raises():
    with pytest.raises(ConfigError):
        eigen_data(jouanolou(2), ProjPoint([0, 0, 1]))


@settings(max_examples=60, deadline=None)
@given(cplx, cplx)
def test_normalize_pair_right_half_plane(a, b):
    if abs(a) < 1e-3 or abs(b) < 1e-3:
        return
    try:
        na, nb, c = normalize_pair(a, b)
    except NumericalError:
        # Siegel domain: a/b negative real
        r = a / b
        assert abs(r.imag) < 1e-6 * abs(r) and r.real < 0
        return
    assert na.real > 0 and nb.real > 0
    assert abs(abs(c) - 1) < 1e-12
    assert abs(na / nb - a / b) < 1e-9 * abs(a / b)


def test_max_chart_ties_take_largest_index():
    assert max_chart(np.array([1, 1, 1])) == 2
    assert max_chart(np.array([2, 1, 1])) == 0
    assert set(CHART_AXES) == {0, 1, 2}
