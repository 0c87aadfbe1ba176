import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from folialab.dimension import (IFS, TransversalMeasureSample, averaged_local_dimension, cantor_ifs, cantor_sample,
                                closed_form, jouanolou_dimension, local_dimension, measure_decay_check, radii_grid,
                                sample_transversal_measure)
from folialab.errors import ConfigError, NumericalError


def uniform_disc(n, seed):
    rng = np.random.default_rng(seed)
    return np.sqrt(rng.random(n)) * np.exp(2j * np.pi * rng.random(n))


def unit_sample(pos):
    return TransversalMeasureSample(pos, np.ones(len(pos)), 0.0, 0.0)


def test_closed_form_values():
    c2 = closed_form(2)
    assert (c2.lyapunov, c2.brunella_bound) == (Fraction(-4), Fraction(1, 4))
    c3 = closed_form(3)
    assert (c3.lyapunov, c3.brunella_bound) == (Fraction(-5, 2), Fraction(2, 5))
    with pytest.raises(ConfigError):
        closed_form(1)
    with pytest.raises(ConfigError):
        closed_form(2.5)


@given(st.integers(2, 10_000))
def test_closed_form_bound_is_inverse_exponent(d):
    # deg N / deg K = (d + 2)/(d - 1) by adjunction on the plane
    c = closed_form(d)
    assert c.lyapunov == -Fraction(d + 2, d - 1)
    assert c.lyapunov * c.brunella_bound == -1
    assert 0 < c.brunella_bound < 1


def test_jouanolou_dimension_record():
    v = jouanolou_dimension()
    assert v == Fraction(1, 4)
    assert v.derivation["|lambda|"]["value"] == "4"
    assert "discrete holonomy pseudogroup" in v.derivation["h_D"]["reason"]


def test_ifs_dimension_oracles():
    assert cantor_ifs().dimension == pytest.approx(math.log(2) / math.log(3))
    assert IFS((0.25, 0.25), (-0.75, 0.75)).dimension == pytest.approx(0.5)
    assert IFS((0.5,), (0.2,)).dimension == 0


def test_ifs_validation():
    with pytest.raises(ConfigError):
        IFS((0.6, 0.6), (-0.3, 0.3))
    with pytest.raises(ConfigError):
        IFS((1.0,), (0,))
    with pytest.raises(ConfigError):
        IFS((0.2, 0.2), (-0.5, 0.5), (0.3, 0.3))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.45), st.floats(0.1, 0.9))
def test_ifs_dimension_formula(r, p):
    f = IFS((r, r), (-(1 - r), 1 - r), (p, 1 - p))
    h = -(p * math.log(p) + (1 - p) * math.log(1 - p))
    assert f.dimension == pytest.approx(h / -math.log(r))
    pts = f.sample(200, seed=1)
    assert np.all(np.abs(pts) <= 1)


def test_uniform_disc_slope():
    s = unit_sample(uniform_disc(2_000_000, 0))
    centers = 0.3 * uniform_disc(16, 1)
    res = averaged_local_dimension(s, centers, radii=radii_grid(0.5, 12, 4.0), seed=1)
    assert abs(res["slope"] - 2) < 0.05


def test_cantor_slope():
    s = unit_sample(cantor_sample(2_000_000, 1))
    res = averaged_local_dimension(s, cantor_sample(16, 2), r_max=0.5, seed=1)
    assert abs(res["slope"] - math.log(2) / math.log(3)) < 0.03
    assert res["spread"][0] <= res["slope"] <= res["spread"][1]


def test_quarter_ifs_slope():
    f = IFS((0.25, 0.25), (-0.75, 0.75))
    s = unit_sample(f.sample(2_000_000, 3))
    res = averaged_local_dimension(s, f.sample(16, 4), seed=1)
    assert abs(res["slope"] - 0.5) < 0.03


def test_atom_slope_zero():
    s = unit_sample(np.full(1000, 0.1 + 0.1j))
    fit = local_dimension(s, 0.1 + 0.1j, r_max=0.5, n_boot=20)
    assert abs(fit.slope) < 1e-12


def test_local_dimension_errors():
    s = unit_sample(uniform_disc(50, 0))
    with pytest.raises(NumericalError):
        local_dimension(s, 0j)
    with pytest.raises(ConfigError):
        local_dimension(s, 0j, radii=[0.1, 0.2])
    with pytest.raises(ConfigError):
        averaged_local_dimension(unit_sample(uniform_disc(10_000, 0)), [0j])


def test_decay_check():
    for f in (cantor_ifs(), IFS((0.25, 0.25), (-0.75, 0.75))):
        res = measure_decay_check(f, n_samples=1_000_000, seed=2)
        assert res["pass"] and abs(res["exponent"] - res["h_star"]) < 0.05
    with pytest.raises(ConfigError):
        measure_decay_check(cantor_ifs(), n_range=[3])


def test_product_hits_equidistribute():
    s = sample_transversal_measure("product", total_time=200, burn_in=10, seed=3, n_paths=400)
    r2 = np.abs(s.positions) ** 2
    ang = np.mod(np.angle(s.positions), 2 * np.pi) / (2 * np.pi)
    # uniform on the disc: |z|^2 and arg are independent uniforms; test each on distinct leaves
    _, first = np.unique(s.positions, return_index=True)
    assert stats.kstest(r2[first], "uniform").pvalue > 1e-3
    assert stats.kstest(ang[first], "uniform").pvalue > 1e-3


def test_product_hit_rate_doubles():
    a = sample_transversal_measure("product", total_time=100, burn_in=0, seed=4, n_paths=400)
    b = sample_transversal_measure("product", total_time=200, burn_in=0, seed=4, n_paths=400)
    assert abs(b.positions.size / a.positions.size - 2) < 0.5


def test_ifs_hits_and_burn_in():
    s = sample_transversal_measure("ifs", total_time=1000, burn_in=100, seed=1, ifs=cantor_ifs())
    assert s.positions.size == 900
    with pytest.raises(ConfigError):
        sample_transversal_measure("product", total_time=10, burn_in=10, seed=1)
    with pytest.raises(ConfigError):
        sample_transversal_measure("nothing", total_time=10, seed=1)
