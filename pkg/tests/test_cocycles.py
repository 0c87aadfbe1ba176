import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from folialab.cocycles import (BUILTIN_CURRENTS, FORMS, LocalLeafContext, SyntheticCurrent, additivity_check,
                               cocycle_identity_check, greedy_net, hL_separated, hR_check, half_mass_cells,
                               integrability_diag, integrate_cocycle, local_leaf_paths, lyapunov_estimate,
                               synthetic_current)
from folialab.errors import ConfigError
from folialab.hyperbolic import disc, sample_bm
from folialab.local_model import LinearSingularity, angular_domain, separatrix_loop

S = LinearSingularity(1, 1 + 1j)


@pytest.fixture(scope="module")
def ctx():
    return LocalLeafContext(S, synthetic_current("poisson"))


def test_constant_path_zero(ctx):
    u0 = 2 * cmath.exp(1j * ctx.dom.bisector)
    for form in FORMS:
        assert integrate_cocycle(form, [u0, u0, u0], ctx).values[form] == 0


def test_loop_eta_m(ctx):
    u0 = 3 * cmath.exp(1j * ctx.dom.bisector)
    loop = separatrix_loop(S)
    assert ctx.potential("eta_m", u0 + loop) - ctx.potential("eta_m", u0) == pytest.approx(-2 * math.pi, abs=1e-12)


def test_split_additivity(ctx):
    u0 = 3 * cmath.exp(1j * ctx.dom.bisector)
    paths = local_leaf_paths(ctx, u0, 2.0, 500, seed=1)
    res = additivity_check(ctx, paths)
    assert set(res) == set(FORMS)
    assert max(res.values()) < 1e-9


def test_integrate_cocycle_inputs(ctx):
    with pytest.raises(ConfigError):
        integrate_cocycle("eta_m", [1.0, 2.0], ctx)
    with pytest.raises(ConfigError):
        integrate_cocycle("nonsense", [-1.0, -2.0], ctx)
    with pytest.raises(ConfigError):
        integrate_cocycle("eta_m", [-1.0, -2.0])
    p = sample_bm(disc(0), 0.5, seed=2)
    cur = synthetic_current("poisson")
    got = integrate_cocycle("beta", p, cur).values["beta"]
    z = p.coordinates
    assert got == pytest.approx(float(cur.log_tau(z[-1]) - cur.log_tau(z[0])))
    with pytest.raises(ConfigError):
        integrate_cocycle("eta_m", p, cur)


@pytest.mark.parametrize("name", sorted(BUILTIN_CURRENTS))
def test_current_invariants(name):
    c = synthetic_current(name)
    h = c.harnack_check(100_000, seed=3)
    assert h["violations"] == 0
    assert c.mean_value_check() < 1e-10
    z = 0.9 * np.exp(2j * np.pi * np.linspace(0, 1, 50))
    assert np.all(c.tau(z) > 0)


def test_current_validation():
    with pytest.raises(ConfigError):
        SyntheticCurrent("nope")
    with pytest.raises(ConfigError):
        SyntheticCurrent("poisson", xi=0.5)
    with pytest.raises(ConfigError):
        synthetic_current("nope")


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 0.9), st.floats(0, 2 * math.pi), st.floats(-3, 3))
def test_laplacian_log_tau_is_minus_gradient_square(r, a, t):
    # Delta log tau = -|grad log tau|^2 for harmonic tau; laplacian_log is the disc-metric
    # Laplacian, (1 - |z|^2)^2 / 4 times the Euclidean one
    c = synthetic_current("poisson-mixture")
    z = r * cmath.exp(1j * a)
    h = 1e-4
    f = lambda w: float(c.log_tau(np.array([w]), t)[0])
    lap = (f(z + h) + f(z - h) + f(z + 1j * h) + f(z - 1j * h) - 4 * f(z)) / h ** 2 * (1 - r * r) ** 2 / 4
    assert lap == pytest.approx(float(c.laplacian_log(np.array([z]), t)[0]), rel=1e-3, abs=1e-3)


def test_product_lyapunov_zero_and_stationary():
    a = lyapunov_estimate("product", t=5.0, N=4096, seed=1)
    b = lyapunov_estimate("product", t=10.0, N=4096, seed=2)
    assert abs(a.estimate) < 3 * a.stderr + 1e-12
    assert abs(a.estimate - b.estimate) < 3 * math.hypot(a.stderr, b.stderr)
    with pytest.raises(ConfigError):
        lyapunov_estimate("product", t=0.0, N=10, seed=1)


def test_identity_constant_current():
    res = cocycle_identity_check(synthetic_current("constant"), t=1.0, N=2000, seed=1)
    assert res["lhs"] == 0 and res["rhs"] == 0 and res["pass"]


@pytest.mark.parametrize("name", ["poisson", "poisson-mixture"])
def test_identity_poisson(name):
    res = cocycle_identity_check(synthetic_current(name), t=2.0, N=20_000, seed=5)
    assert res["pass"]


def test_identity_rejects_outside_point():
    with pytest.raises(ConfigError):
        cocycle_identity_check(synthetic_current("poisson"), x=1.2, N=100)


def test_hr_constant_matches_plane():
    res = hR_check(synthetic_current("constant"), t=20.0, N=20_000, seed=2)
    assert abs(res["estimate"] - 1) < 0.05
    assert res["h_D"] == 0


def test_hr_small_time():
    long = hR_check(synthetic_current("poisson"), t=20.0, N=5000, seed=3)
    short = hR_check(synthetic_current("poisson"), t=0.5, N=5000, seed=3)
    assert short["pass"] and long["pass"]
    assert short["stderr"] > long["stderr"]


def test_hl_identical_endpoints_rate_zero():
    ends = {n: (np.zeros(500), np.zeros(500)) for n in (2, 4, 6)}
    assert hL_separated(ends)["rate"] == 0


def test_hl_needs_three_times():
    with pytest.raises(ConfigError):
        hL_separated({1: (np.zeros(3), np.zeros(3)), 2: (np.zeros(3), np.zeros(3))})


def test_greedy_net_deterministic_and_stable():
    rng = np.random.default_rng(0)
    r = np.abs(rng.normal(3, 1, 3000))
    phi = rng.uniform(0, 2 * np.pi, 3000)
    a = greedy_net(r, phi, 1.0)
    assert np.array_equal(a, greedy_net(r, phi, 1.0))
    k1, _ = half_mass_cells(r, phi, fold=False)
    perm = rng.permutation(3000)
    k2, _ = half_mass_cells(r[perm], phi[perm], fold=False)
    assert 0.5 < k1 / k2 < 2


@pytest.mark.slow
def test_integrability_diagnostics():
    res = integrability_diag("jouanolou", T=50, N=200, seed=1)
    assert res["Q"]["stable"]
    assert res["Q"]["last_half_deviation"] <= 0.10
    assert res["rough_bound"]["violations"] == 0
    assert res["never_entered_singular_regions_rho_max"] <= 1.0 + 1e-12
