"""Leaves of a polynomial foliation of P^2.

Complex time u is measured with the affine field of the max-modulus chart, so
|du| is a continuous flat metric g_s along leaves (the chart factor is
unimodular where charts switch).  The covering is made of flow boxes:
lattice cells in the chart coordinates of R^4, refined until the field is
nearly constant on the doubled ball.  Near a hyperbolic singular point p the
region B_p = {|xi|_inf < r_lin} (xi eigen-coordinates) is not covered
directly: a point q there belongs to the box of its exit point pi(q), reached
by flowing the normalized field in real time until |xi|_inf = r_lin.
Outside every B_p, pi is the identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericalError
from .geometry import (CHART_AXES, FoliationSpec, ProjPoint, SingularityData, chart_jacobian, jouanolou, lift, max_chart,
                       singularities, to_chart)

KAPPA = 0.5
S0 = 0.25
MAX_LEVEL = 30
_DIRS = np.array([[1, 0], [0, 1], [-1, 0], [0, -1], [1j, 0], [0, 1j],
                  [1 / math.sqrt(2), 1 / math.sqrt(2)], [1 / math.sqrt(2), -1j / math.sqrt(2)]], dtype=complex)


def hdot(a, b):
    """Hermitian pairing sum a_i conj(b_i) over the last axis (linear in a)."""
    return (np.asarray(a) * np.conj(b)).sum(-1)


def normalize(w) -> np.ndarray:
    """Homogeneous points scaled so the max-modulus coordinate equals 1."""
    w = np.asarray(w, dtype=complex)
    k = max_chart(w)
    return w / np.take_along_axis(w, np.asarray(k)[..., None], axis=-1)


def _by_chart(charts, fn, z, out_shape, dtype=complex):
    out = np.empty(out_shape, dtype=dtype)
    for c in np.unique(charts):
        m = charts == c
        out[m] = fn(int(c), z[m])
    return out


_AX = np.array([CHART_AXES[c] for c in range(3)])


def _lift_idx(charts, z):
    charts = np.asarray(charts)
    shp = z.shape[:-1]
    w = np.ones(shp + (3,), dtype=complex)
    ii = _AX[charts, 0]
    jj = _AX[charts, 1]
    np.put_along_axis(w, ii[..., None], z[..., 0:1], axis=-1)
    np.put_along_axis(w, jj[..., None], z[..., 1:2], axis=-1)
    return w, ii, jj


def _take(a, idx):
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


def field_at(spec, charts, z):
    """Affine field with a chart per point (charts broadcast against z[..., 0])."""
    charts = np.broadcast_to(np.asarray(charts), z.shape[:-1])
    w, ii, jj = _lift_idx(charts, z)
    F = spec.homogeneous(w)
    Fk = _take(F, charts)
    return np.stack([_take(F, ii) - z[..., 0] * Fk, _take(F, jj) - z[..., 1] * Fk], axis=-1)


def jac_at(spec, charts, z):
    charts = np.broadcast_to(np.asarray(charts), z.shape[:-1])
    w, ii, jj = _lift_idx(charts, z)
    F = spec.homogeneous(w)
    G = spec.homogeneous_jacobian(w)
    Fk = _take(F, charts)

    def g(r, c):
        return np.take_along_axis(np.take_along_axis(G, r[..., None, None], axis=-2)[..., 0, :], c[..., None], axis=-1)[..., 0]
    J = np.empty(z.shape[:-1] + (2, 2), dtype=complex)
    J[..., 0, 0] = g(ii, ii) - Fk - z[..., 0] * g(charts, ii)
    J[..., 0, 1] = g(ii, jj) - z[..., 0] * g(charts, jj)
    J[..., 1, 0] = g(jj, ii) - z[..., 1] * g(charts, ii)
    J[..., 1, 1] = g(jj, jj) - Fk - z[..., 1] * g(charts, jj)
    return J


def rk4_step(spec, charts, z, h, xi=None, trace=False):
    """One RK4 step of dz/du = V(z) over complex time h (per point), in fixed charts.

    Returns (z, xi, integral of tr DV du); xi (if given) is transported by the
    variational equation.
    """
    h = np.asarray(h, dtype=complex)
    hh = h[..., None]
    need_j = xi is not None or trace

    def stage(zz, xx):
        V = field_at(spec, charts, zz)
        if not need_j:
            return V, None, None
        J = jac_at(spec, charts, zz)
        tr = J[..., 0, 0] + J[..., 1, 1]
        dx = None if xx is None else np.einsum("...ij,...j->...i", J, xx)
        return V, dx, tr

    k1, x1, t1 = stage(z, xi)
    k2, x2, t2 = stage(z + hh / 2 * k1, None if xi is None else xi + hh / 2 * x1)
    k3, x3, t3 = stage(z + hh / 2 * k2, None if xi is None else xi + hh / 2 * x2)
    k4, x4, t4 = stage(z + hh * k3, None if xi is None else xi + hh * x3)
    z_new = z + hh / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    xi_new = None if xi is None else xi + hh / 6 * (x1 + 2 * x2 + 2 * x3 + x4)
    tr_int = h / 6 * (t1 + 2 * t2 + 2 * t3 + t4) if trace else None
    return z_new, xi_new, tr_int


def flow(spec, charts, z, tau, xi=None, max_h=0.05):
    """Flow complex time tau (per point) in fixed charts with RK4 substeps of size <= max_h / ||DV||."""
    tau = np.asarray(tau, dtype=complex)
    J = jac_at(spec, charts, z)
    scale = np.maximum(np.linalg.norm(J, axis=(-2, -1)), 1e-3)
    nsub = int(np.clip(np.ceil(np.max(np.abs(tau) * scale) / max_h), 1, 100000)) if tau.size else 1
    h = tau / nsub
    for _ in range(nsub):
        z, xi, _ = rk4_step(spec, charts, z, h, xi)
    return z, xi


def switch_charts(charts, z, xi=None):
    """Move points to their max-modulus chart; tangent vectors follow the chart Jacobian.

    Also returns log|w_new| (old normalization) per point, zero if unmoved:
    the max-chart normal metric |det(V, xi)| jumps by -(d+2) times it.
    """
    w = lift_many(charts, z)
    new = max_chart(w)
    moved = new != charts
    jump = np.zeros(z.shape[0])
    if not np.any(moved):
        return charts, z, xi, jump
    jump[moved] = np.log(np.abs(w[moved, new[moved]]))
    z = z.copy()
    if xi is not None:
        xi = xi.copy()
    for src in (0, 1, 2):
        for dst in (0, 1, 2):
            m = moved & (charts == src) & (new == dst)
            if not np.any(m):
                continue
            if xi is not None:
                Jc = chart_jacobian(z[m], src, dst)
                xi[m] = np.einsum("...ij,...j->...i", Jc, xi[m])
            z[m] = to_chart(w[m], dst)
    return new, z, xi, jump


def lift_many(charts, z):
    return _lift_idx(np.broadcast_to(np.asarray(charts), z.shape[:-1]), z)[0]


# ---------------------------------------------------------------------------
# leaf continuation along a complex-time polyline
# ---------------------------------------------------------------------------

@dataclass
class LeafPath:
    spec: FoliationSpec
    start: ProjPoint
    time_path: np.ndarray
    trace: np.ndarray  # (m, 3) homogeneous, max coordinate 1
    charts: np.ndarray  # chart used for the time parameter at each trace point
    times: np.ndarray  # complex time at each trace point
    eta: np.ndarray  # cumulative integral of tr DV du
    integrator_error: float = 0.0
    box_itinerary: List = field(default_factory=list)

    @property
    def ambient_trace(self) -> List[ProjPoint]:
        return [ProjPoint(w) for w in self.trace]

    @property
    def duration(self) -> float:
        return float(np.abs(np.diff(self.time_path)).sum()) if len(self.time_path) > 1 else 0.0

    @property
    def end(self) -> ProjPoint:
        return ProjPoint(self.trace[-1])

    def reversed(self) -> "LeafPath":
        """Same leaf path traversed backwards (the trace is reversed, not the time polyline)."""
        tr = self.trace[::-1].copy()
        return LeafPath(self.spec, ProjPoint(tr[0]), self.time_path[::-1] - self.time_path[-1] + self.time_path[0],
                        tr, self.charts[::-1].copy(), self.times[::-1] - self.times[-1] + self.times[0],
                        self.eta[::-1] - self.eta[-1] + self.eta[0], self.integrator_error)

    def gs_length(self) -> float:
        return float(np.abs(np.diff(self.times)).sum())

    def cocycle(self, form: str) -> float:
        if form == "gs_length":
            return self.gs_length()
        if form == "eta_m":
            return float((self.eta[-1] - self.eta[0]).real)
        raise ConfigError(f"form {form!r} needs a local model or a synthetic current")

    def coords(self, k: int, chart: Optional[int] = None) -> np.ndarray:
        return to_chart(self.trace[k], self.charts[k] if chart is None else chart)


_DP_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_DP_A = [[], [1 / 5], [3 / 40, 9 / 40], [44 / 45, -56 / 15, 32 / 9],
         [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
         [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
         [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]]
_DP_B5 = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_DP_B4 = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _dp_step(spec, chart, z, e, h):
    """Dormand-Prince 5(4) step for (z, eta) with d/ds = delta * (V, tr DV); h real."""
    ks, ts = [], []
    for i in range(7):
        zz = z + h * sum(a * k for a, k in zip(_DP_A[i], ks)) if i else z
        V = spec.field(chart, zz)
        J = spec.jacobian(chart, zz)
        ks.append(e * V)
        ts.append(e * (J[0, 0] + J[1, 1]))
    ks_a, ts_a = np.array(ks), np.array(ts)
    z5 = z + h * (_DP_B5 @ ks_a)
    z4 = z + h * (_DP_B4 @ ks_a)
    return z5, h * (_DP_B5 @ ts_a), float(np.max(np.abs(z5 - z4)))


def continue_leaf(spec: FoliationSpec, start, time_path: Sequence[complex] = (), tol: float = 1e-11,
                  chart: Optional[int] = None, max_step: float = 0.01, handoff: bool = True,
                  covering: Optional["Covering"] = None, excluded_fraction: float = 1e-6) -> LeafPath:
    """Integrate dz/du = V(z) along a polyline in complex time.

    Adaptive Dormand-Prince with error per step <= tol (times the state
    size).  The time parameter uses the max-modulus chart unless `chart` pins
    one.  Steps are also capped so the ambient displacement stays below
    max_step.  For an exactly linear field the closed-form flow is used when
    `handoff` is set.  Entering the ball |xi|_inf < excluded_fraction * r_lin
    of a singular point raises NumericalError.
    """
    p0 = start if isinstance(start, ProjPoint) else ProjPoint(start)
    tp = np.asarray(list(time_path), dtype=complex)
    if tp.size == 0:
        tp = np.array([0j])
    w0 = p0.array
    ch = int(max_chart(w0)) if chart is None else int(chart)
    if abs(w0[ch]) < 1e-12 * np.linalg.norm(w0):
        raise ConfigError("start point is not in the pinned chart")
    z = to_chart(w0, ch)
    if np.linalg.norm(spec.field(ch, z)) < 1e-14:
        raise ConfigError("start point is singular")
    guards = _singular_guards(spec, covering)
    if handoff and _is_diagonal_linear(spec):
        lp = _linear_leaf(spec, p0, tp)
        if any(g(w) for w in lp.trace for g in guards):
            raise NumericalError("leaf entered the excluded ball of a singular point")
        return lp
    trace, charts, times, etas = [lift(ch, z)], [ch], [tp[0]], [0j]
    err_total = 0.0
    eta = 0j
    u = tp[0]
    for a, b in zip(tp[:-1], tp[1:]):
        e = b - a
        if e == 0:
            continue
        s = 0.0
        h = min(1.0, 0.1 / (abs(e) * max(np.linalg.norm(spec.jacobian(ch, z)), 1e-3)))
        while s < 1.0 - 1e-15:
            h = min(h, 1.0 - s)
            speed = abs(e) * np.linalg.norm(spec.field(ch, z))
            if speed * h > max_step:
                h = max_step / speed
            z_new, d_eta, err = _dp_step(spec, ch, z, e, h)
            scale = tol * max(1.0, float(np.max(np.abs(z))))
            if err <= scale or h < 1e-14:
                if h < 1e-14 and err > scale:
                    raise NumericalError("step size underflow in leaf continuation")
                s += h
                z = z_new
                eta += d_eta
                u = a + s * e
                err_total += err
                if chart is None:
                    w = lift(ch, z)
                    nc = int(max_chart(w))
                    if nc != ch and abs(w[nc]) > 1 + 1e-9:
                        eta -= (spec.degree + 2) * math.log(abs(w[nc]))
                        ch = nc
                        z = to_chart(w, ch)
                for g in guards:
                    if g(lift(ch, z)):
                        raise NumericalError("leaf entered the excluded ball of a singular point")
                trace.append(lift(ch, z))
                charts.append(ch)
                times.append(u)
                etas.append(eta)
            fac = 0.9 * (scale / max(err, 1e-300)) ** 0.2
            h = h * min(4.0, max(0.2, fac))
    tr = normalize(np.array(trace))
    return LeafPath(spec, p0, tp, tr, np.array(charts), np.array(times), np.array(etas), err_total)


def _is_diagonal_linear(spec: FoliationSpec) -> bool:
    if spec.degree != 1:
        return False
    c = spec._coef
    e = [tuple(x) for x in spec._exps]
    allowed = {(0, (1, 0, 0)), (1, (0, 1, 0))}
    for m in range(3):
        for col, ex in enumerate(e):
            if abs(c[m, col]) > 0 and (m, ex) not in allowed:
                return False
    return True


def _linear_leaf(spec, p0, tp):
    """Closed-form flow (x e^{a u}, y e^{b u}) in the chart Z = 1."""
    e = [tuple(x) for x in spec._exps]
    a = spec._coef[0, e.index((1, 0, 0))] if (1, 0, 0) in e else 0
    b = spec._coef[1, e.index((0, 1, 0))] if (0, 1, 0) in e else 0
    z0 = p0.in_chart(2)
    if not np.all(np.isfinite(z0)):
        raise ConfigError("linear model points must lie in the chart Z = 1")
    us = [tp[0]]
    for s0, s1 in zip(tp[:-1], tp[1:]):
        n = max(2, int(np.ceil(abs(s1 - s0) / 0.01)))
        us.extend(s0 + (s1 - s0) * np.linspace(0, 1, n + 1)[1:])
    us = np.array(us) - tp[0]
    z = np.stack([z0[0] * np.exp(a * us), z0[1] * np.exp(b * us)], axis=-1)
    trace = normalize(lift(2, z))
    return LeafPath(spec, p0, tp, trace, np.full(len(us), 2), us + tp[0], (a + b) * us, 0.0)


def _singular_guards(spec, covering):
    if covering is None:
        return []
    out = []
    for sd, E_inv, r in zip(covering.sings, covering._Einv, covering._rlin):
        p = sd.coords()
        ch = sd.chart
        lim = r * 1e-6

        def g(w, p=p, ch=ch, E_inv=E_inv, lim=lim):
            if abs(w[ch]) < 1e-8:
                return False
            xi = E_inv @ (to_chart(w, ch) - p)
            return bool(np.max(np.abs(xi)) < lim)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# covering by flow boxes
# ---------------------------------------------------------------------------

@dataclass
class Box:
    key: tuple
    chart: int
    center: np.ndarray
    side: float
    vhat: np.ndarray
    normal: np.ndarray
    speed: float

    @property
    def plaque_radius(self) -> float:
        return 2 * self.side

    @property
    def transverse_radius(self) -> float:
        return self.side

    def to_dict(self) -> Dict:
        return {"key": list(self.key), "chart": self.chart, "center": [[c.real, c.imag] for c in self.center],
                "plaque_radius": self.plaque_radius, "transverse_radius": self.transverse_radius}


class Covering:
    """Flow-box covering of P^2 minus the singular regions, extended over them by pi."""

    def __init__(self, spec: FoliationSpec, sings: Optional[List[SingularityData]] = None,
                 kappa: float = KAPPA, s0: float = S0, max_level: int = MAX_LEVEL):
        self.spec = spec
        self.sings = singularities(spec) if sings is None else list(sings)
        for sd in self.sings:
            if not sd.hyperbolic:
                raise ConfigError("covering needs hyperbolic singular points")
        self.kappa, self.s0, self.max_level = kappa, s0, max_level
        self._E = [sd.eigvec_matrix() for sd in self.sings]
        self._Einv = [np.linalg.inv(E) for E in self._E]
        self._rlin = [sd.linearization_radius for sd in self.sings]
        self.boxes: Dict[tuple, Box] = {}
        self.delta0 = self.theta = self.rho0 = self.zeta = None
        self.calibration: Dict = {}

    # singular regions -----------------------------------------------------
    def singular_index(self, w) -> np.ndarray:
        """Index of the region B_p containing each homogeneous point, or -1."""
        w = np.atleast_2d(w)
        idx = np.full(w.shape[0], -1)
        for k, (sd, Einv, r) in enumerate(zip(self.sings, self._Einv, self._rlin)):
            ch = sd.chart
            ok = np.abs(w[:, ch]) > 1e-3
            z = np.where(ok[:, None], to_chart(np.where(ok[:, None], w, 1.0), ch), 0)
            xi = (z - sd.coords()) @ Einv.T
            inside = ok & (np.max(np.abs(xi), axis=1) < r) & (idx < 0)
            idx[inside] = k
        return idx

    def project(self, w, vec=None, vec_charts=None):
        """Exit projection pi for homogeneous points w (n, 3).

        vec: optional tangent vectors (n, 2) in the coordinates of vec_charts;
        they are transported along the exit flow and returned in the
        coordinates of the max chart of the projected point.
        """
        w = normalize(np.atleast_2d(w))
        n = w.shape[0]
        out = w.copy()
        ch_out = max_chart(w)
        v_out = None
        if vec is not None:
            v_out = _convert_vectors(w, vec, vec_charts, ch_out)
        idx = self.singular_index(w)
        for k in np.unique(idx[idx >= 0]):
            m = idx == k
            sd = self.sings[k]
            ch = sd.chart
            z = to_chart(w[m], ch)
            v = None if vec is None else _convert_vectors(w[m], v_out[m], ch_out[m], np.full(m.sum(), ch))
            z, v = self._exit_flow(k, z, v)
            wm = normalize(lift(ch, z))
            out[m] = wm
            ch_out[m] = max_chart(wm)
            if vec is not None:
                v_out[m] = _convert_vectors(wm, v, np.full(m.sum(), ch), ch_out[m])
        return out, v_out, ch_out

    def _xi_norm(self, k, z):
        return np.max(np.abs((z - self.sings[k].coords()) @ self._Einv[k].T), axis=-1)

    def _exit_flow(self, k, z, v=None):
        sd = self.sings[k]
        ch = sd.chart
        r = self._rlin[k] * (1 + 1e-9)
        c = sd.normalization_factor
        lam = max(abs(x) for x in sd.raw_eigenvalues)
        h = 0.05 / lam
        charts = np.full(z.shape[0], ch)
        z = z.copy()
        v = None if v is None else v.copy()
        active = self._xi_norm(k, z) < r
        pend = []
        for _ in range(200000):
            if not np.any(active):
                break
            ia = np.where(active)[0]
            za, va, _ = rk4_step(self.spec, charts[ia], z[ia], np.full(ia.size, c * h), None if v is None else v[ia])
            out = self._xi_norm(k, za) >= r
            keep = ia[~out]
            z[keep] = za[~out]
            if v is not None:
                v[keep] = va[~out]
            pend.append(ia[out])
            active[ia[out]] = False
        else:
            raise NumericalError("exit flow did not leave the singular region")
        cross = np.concatenate(pend) if pend else np.zeros(0, dtype=int)
        if cross.size:
            # locate the crossing inside the last step
            lo = np.zeros(cross.size)
            hi = np.ones(cross.size)
            for _ in range(48):
                mid = 0.5 * (lo + hi)
                zm, _, _ = rk4_step(self.spec, charts[cross], z[cross], c * h * mid)
                inside = self._xi_norm(k, zm) < r
                lo = np.where(inside, mid, lo)
                hi = np.where(inside, hi, mid)
            zc, vc, _ = rk4_step(self.spec, charts[cross], z[cross], c * h * hi, None if v is None else v[cross])
            z[cross] = zc
            if v is not None:
                v[cross] = vc
        return z, v

    # regular boxes ----------------------------------------------------------
    def _valid(self, charts, centers, s):
        V = field_at(self.spec, charts, centers)
        J = jac_at(self.spec, charts, centers)
        sp = np.linalg.norm(V, axis=-1)
        ok = 2 * s * np.linalg.norm(J, axis=(-2, -1)) <= self.kappa * sp
        if np.any(ok):
            io = np.where(ok)[0]
            pts = centers[io, None, :] + 2 * s[io, None, None] * _DIRS[None]
            Vd = field_at(self.spec, np.repeat(charts[io, None], len(_DIRS), axis=1), pts)
            ok[io] = np.all(np.linalg.norm(Vd - V[io, None], axis=-1) <= self.kappa * sp[io, None], axis=1)
        return ok

    def cell_keys(self, wp) -> List[tuple]:
        """Box keys (chart, level, i1..i4) of projected points wp (n, 3)."""
        return [tuple(int(x) for x in k) for k in self.key_array(wp)]

    def key_array(self, wp) -> np.ndarray:
        """cell_keys as an (n, 6) integer array."""
        wp = normalize(np.atleast_2d(wp))
        charts = max_chart(wp)
        z = np.empty((wp.shape[0], 2), dtype=complex)
        for c in (0, 1, 2):
            m = charts == c
            if np.any(m):
                z[m] = to_chart(wp[m], c)
        x4 = np.stack([z[:, 0].real, z[:, 0].imag, z[:, 1].real, z[:, 1].imag], axis=1)
        x4 = np.clip(x4, -1, 1)
        keys = np.full((wp.shape[0], 6), -1, dtype=np.int64)
        # start from the level suggested by |V| / ||DV|| at the point itself
        V = field_at(self.spec, charts, z)
        J = jac_at(self.spec, charts, z)
        guess = self.kappa * np.linalg.norm(V, axis=-1) / (2 * np.maximum(np.linalg.norm(J, axis=(-2, -1)), 1e-12))
        lev = np.clip(np.floor(np.log2(self.s0 / np.maximum(guess, 1e-300))).astype(int) - 1, 0, self.max_level - 1)
        todo = np.arange(wp.shape[0])
        for _ in range(self.max_level):
            if todo.size == 0:
                break
            s = self.s0 * 2.0 ** -lev[todo]
            ncell = np.round(2 / s).astype(np.int64)
            idx = np.minimum(np.clip(np.floor((x4[todo] + 1) / s[:, None]).astype(np.int64), 0, None), ncell[:, None] - 1)
            c4 = -1 + (idx + 0.5) * s[:, None]
            cen = np.stack([c4[:, 0] + 1j * c4[:, 1], c4[:, 2] + 1j * c4[:, 3]], axis=1)
            ok = self._valid(charts[todo], cen, s)
            done = todo[ok]
            keys[done, 0] = charts[done]
            keys[done, 1] = lev[done]
            keys[done, 2:] = idx[ok]
            todo = todo[~ok]
            lev[todo] += 1
            todo = todo[lev[todo] < self.max_level]
        if np.any(keys[:, 0] < 0):
            raise NumericalError(f"{int(np.sum(keys[:, 0] < 0))} points need boxes finer than level {self.max_level}")
        return keys

    def box(self, key: tuple) -> Box:
        b = self.boxes.get(key)
        if b is None:
            ch, lev = key[0], key[1]
            s = self.s0 * 2.0 ** -lev
            c4 = -1 + (np.array(key[2:]) + 0.5) * s
            cen = np.array([c4[0] + 1j * c4[1], c4[2] + 1j * c4[3]])
            V = self.spec.field(ch, cen)
            sp = float(np.linalg.norm(V))
            vh = V / sp
            nrm = np.array([-np.conj(vh[1]), np.conj(vh[0])])
            b = Box(key, ch, cen, s, vh, nrm, sp)
            self.boxes[key] = b
        return b

    def contains(self, key, wp) -> np.ndarray:
        """Membership of projected points wp in the doubled ball of the box."""
        b = self.box(key)
        wp = np.atleast_2d(wp)
        wk = wp[..., b.chart]
        ok = np.abs(wk) > 1e-8
        z = np.stack([wp[..., i] for i in range(3) if i != b.chart], axis=-1) / np.where(ok, wk, 1)[..., None]
        return ok & (np.linalg.norm(z - b.center, axis=-1) < 2 * b.side)

    def t_value(self, key, w, vec=None, vec_chart=None, tol=1e-14):
        """First integral t_k and its differential on a vector, at one point w.

        The point is projected by pi, moved to the box chart and slid along
        its leaf to the transversal {<z - c, vhat> = 0}.
        """
        b = self.box(key)
        wp, vp, chp = self.project(np.atleast_2d(w), None if vec is None else np.atleast_2d(vec),
                                   None if vec is None else np.atleast_1d(vec_chart))
        if abs(wp[0, b.chart]) < 1e-8:
            raise NumericalError("point is outside the box chart")
        z = to_chart(wp, b.chart)
        v = None if vec is None else _convert_vectors(wp, vp, chp, np.array([b.chart]))
        charts = np.array([b.chart])
        for _ in range(60):
            g = hdot(z - b.center, b.vhat)
            V = self.spec.field(b.chart, z)
            d = -g / hdot(V, b.vhat)
            if np.all(np.abs(d) * b.speed < tol * max(1.0, b.side)):
                break
            z, v = flow(self.spec, charts, z, d, v)
        else:
            raise NumericalError("slide to the transversal did not converge")
        t = complex(hdot(z - b.center, b.normal)[0])
        if vec is None:
            return t, None
        V = self.spec.field(b.chart, z)
        dt = hdot(v, b.normal) - hdot(v, b.vhat) * hdot(V, b.normal) / hdot(V, b.vhat)
        return t, complex(dt[0])

    def point_on_transversal(self, key, t) -> np.ndarray:
        b = self.box(key)
        return normalize(lift(b.chart, b.center + t * b.normal))

    def to_dict(self, max_boxes: int = 200) -> Dict:
        levels: Dict[int, int] = {}
        for k in self.boxes:
            levels[k[1]] = levels.get(k[1], 0) + 1
        return {"spec": self.spec.name, "kappa": self.kappa, "s0": self.s0,
                "singular_regions": [{"location": [[c.real, c.imag] for c in sd.location.array],
                                      "chart": sd.chart, "radius": r}
                                     for sd, r in zip(self.sings, self._rlin)],
                "boxes_materialized": len(self.boxes), "boxes_per_level": {str(k): v for k, v in sorted(levels.items())},
                "box_table": [b.to_dict() for b in list(self.boxes.values())[:max_boxes]],
                "delta0": self.delta0, "theta": self.theta, "rho0": self.rho0, "zeta": self.zeta,
                "calibration": self.calibration}


def _convert_vectors(w, vec, src, dst):
    """Tangent vectors at homogeneous points w from chart src to chart dst coordinates."""
    vec = np.asarray(vec, dtype=complex).copy()
    src = np.broadcast_to(np.asarray(src), vec.shape[:1])
    dst = np.broadcast_to(np.asarray(dst), vec.shape[:1])
    for a in (0, 1, 2):
        for b in (0, 1, 2):
            m = (src == a) & (dst == b)
            if a == b or not np.any(m):
                continue
            Jc = chart_jacobian(to_chart(w[m], a), a, b)
            vec[m] = np.einsum("...ij,...j->...i", Jc, vec[m])
    return vec


def random_regular_points(cov: Covering, n: int, seed: int = 0) -> np.ndarray:
    """Fubini-Study uniform points of P^2 outside every singular region."""
    rng = np.random.default_rng(seed)
    out = []
    while sum(len(o) for o in out) < n:
        g = rng.standard_normal((2 * n, 3)) + 1j * rng.standard_normal((2 * n, 3))
        w = normalize(g)
        out.append(w[cov.singular_index(w) < 0])
    return np.concatenate(out)[:n]


def coverage_test(cov: Covering, n: int = 100_000, seed: int = 0, include_singular: bool = True) -> Dict:
    """Rejection-sampling check that random points get a box containing them."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, 3)) + 1j * rng.standard_normal((n, 3))
    w = normalize(g)
    if not include_singular:
        w = w[cov.singular_index(w) < 0]
    wp, _, _ = cov.project(w)
    keys = cov.cell_keys(wp)
    uncovered = 0
    by_key: Dict[tuple, List[int]] = {}
    for i, k in enumerate(keys):
        by_key.setdefault(k, []).append(i)
    for k, ids in by_key.items():
        uncovered += int(np.sum(~cov.contains(k, wp[ids])))
    return {"n": int(w.shape[0]), "uncovered": uncovered, "in_singular_regions": int(np.sum(cov.singular_index(w) >= 0)),
            "distinct_boxes": len(by_key)}


# ---------------------------------------------------------------------------
# itineraries, crossing counts, holonomy
# ---------------------------------------------------------------------------

def itineraries(cov: Covering, traces: np.ndarray, window: int = 64) -> List[List[Tuple[tuple, int, int]]]:
    """Greedy furthest-reach box runs for a batch of traces (n_paths, m, 3).

    A run starts at a trace point in the box of its projected cell and extends
    while the projected points stay in that box's doubled ball; the next box
    is the cell of the run's last point when that box reaches further, else
    the cell of the first point outside.  Returns per path a list of
    (box key, first index, last index).
    """
    traces = np.asarray(traces)
    n, m, _ = traces.shape
    flat = traces.reshape(-1, 3)
    wp, _, _ = cov.project(flat)
    wp = wp.reshape(n, m, 3)
    pos = np.zeros(n, dtype=int)
    keys = cov.cell_keys(wp[:, 0])
    runs: List[List] = [[] for _ in range(n)]
    active = np.ones(n, dtype=bool)
    cur = list(keys)
    while np.any(active):
        ia = np.where(active)[0]
        ends = _run_ends(cov, wp, ia, pos[ia], [cur[i] for i in ia], window)
        for j, i in enumerate(ia):
            runs[i].append((cur[i], int(pos[i]), int(ends[j])))
        done = ends >= m - 1
        active[ia[done]] = False
        ia, ends = ia[~done], ends[~done]
        if ia.size == 0:
            break
        k_last = cov.cell_keys(wp[ia, ends])
        # the box of the last point must reach past it, otherwise start at the next point
        reach = _inside_many(cov, k_last, wp[ia, ends + 1])
        miss = np.where(~reach)[0]
        k_next = cov.cell_keys(wp[ia[miss], ends[miss] + 1]) if miss.size else []
        for j, i in enumerate(ia):
            if reach[j]:
                cur[i], pos[i] = k_last[j], ends[j]
        for j, kn in zip(miss, k_next):
            cur[ia[j]], pos[ia[j]] = kn, ends[j] + 1
    return runs


def key_geometry(cov, keys):
    """(chart, side, center) arrays for box keys, without materializing boxes."""
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 6)
    s = cov.s0 * 2.0 ** -k[:, 1].astype(float)
    c4 = -1 + (k[:, 2:] + 0.5) * s[:, None]
    return k[:, 0], s, np.stack([c4[:, 0] + 1j * c4[:, 1], c4[:, 2] + 1j * c4[:, 3]], axis=1)


def _inside_many(cov, keys, pts):
    """Membership of pts[i] in the doubled ball of box keys[i]."""
    charts, sides, centers = key_geometry(cov, keys)
    out = np.zeros(len(keys), dtype=bool)
    for c in (0, 1, 2):
        g = charts == c
        if not np.any(g):
            continue
        p = pts[g]
        ok = np.abs(p[:, c]) > 1e-8
        z = np.stack([p[:, i] for i in range(3) if i != c], axis=-1) / np.where(ok, p[:, c], 1)[:, None]
        out[g] = ok & (np.linalg.norm(z - centers[g], axis=-1) < 2 * sides[g])
    return out


def _run_ends(cov, wp, ia, start, keys, window):
    """Last index of each run (vectorized over paths)."""
    m = wp.shape[1]
    ends = start.copy()
    open_ = np.ones(ia.size, dtype=bool)
    off = start + 1
    # group paths by box chart to vectorize membership
    charts, sides, centers = key_geometry(cov, keys)
    while np.any(open_):
        io = np.where(open_)[0]
        idx = off[io, None] + np.arange(window)[None, :]
        valid = idx < m
        idx_c = np.minimum(idx, m - 1)
        pts = wp[ia[io, None], idx_c]  # (k, window, 3)
        inside = np.zeros(idx.shape, dtype=bool)
        for c in (0, 1, 2):
            g = charts[io] == c
            if not np.any(g):
                continue
            p = pts[g]
            wk = p[..., c]
            ok = np.abs(wk) > 1e-8
            z = np.stack([p[..., i] for i in range(3) if i != c], axis=-1) / np.where(ok, wk, 1)[..., None]
            inside[g] = ok & (np.linalg.norm(z - centers[io][g][:, None, :], axis=-1) < 2 * sides[io][g][:, None])
        inside &= valid
        first_out = np.where(~inside.all(axis=1), np.argmin(inside, axis=1), window)
        ends[io] = np.minimum(off[io] + first_out - 1, m - 1)
        finished = (first_out < window) | (off[io] + window >= m)
        open_[io[finished]] = False
        off[io] = off[io] + window
    return ends


def minimal_runs(cov: Covering, wp: np.ndarray, keys: Optional[np.ndarray] = None) -> List[Tuple[tuple, int, int]]:
    """Fewest box runs covering one projected trace wp (m, 3).

    Candidate boxes are the cells owning the trace points.  For each index i
    reach[i] is the furthest index a candidate box holds contiguously from i,
    and jumping along reach is an optimal interval cover.  The count is
    subadditive under concatenation because the candidates of a sub-path are
    candidates of the whole path.
    """
    m = wp.shape[0]
    if keys is None:
        keys = cov.key_array(wp)
    uk = np.unique(keys, axis=0)
    charts, sides, centers = key_geometry(cov, uk)
    mask = np.zeros((uk.shape[0], m), dtype=bool)
    for c in (0, 1, 2):
        g = charts == c
        if not np.any(g):
            continue
        ok = np.abs(wp[:, c]) > 1e-8
        z = np.stack([wp[:, i] for i in range(3) if i != c], axis=-1) / np.where(ok, wp[:, c], 1)[:, None]
        cg = centers[g]
        # squared distances through one complex product
        d2 = (np.abs(cg) ** 2).sum(1)[:, None] + (np.abs(z) ** 2).sum(1)[None, :] - 2 * (cg.conj() @ z.T).real
        mask[g] = ok[None, :] & (d2 < 4 * sides[g][:, None] ** 2)
    # maximal runs of every candidate, then the furthest end among runs starting at or before i
    edge = np.diff(np.pad(mask, ((0, 0), (1, 1))).astype(np.int8), axis=1)
    r_start, b = np.nonzero(edge == 1)
    _, e = np.nonzero(edge == -1)
    e = e - 1
    end_at = np.full(m, -1)
    np.maximum.at(end_at, b, e)
    row_at = np.zeros(m, dtype=int)
    top = e == end_at[b]
    row_at[b[top]] = r_start[top]
    idx = np.arange(m)
    reach = np.maximum.accumulate(end_at)
    best = row_at[np.maximum.accumulate(np.where(end_at == reach, idx, 0))]
    if np.any(reach < idx):
        raise NumericalError("a trace point lies outside the box of its own cell")
    runs, i = [], 0
    while True:
        e = int(reach[i])
        runs.append((tuple(int(v) for v in uk[best[i]]), i, e))
        if e >= m - 1:
            return runs
        i = e + 1


def crossing_count(cov: Covering, path) -> int:
    """Minimal number of box changes (0 when one box holds the whole path)."""
    tr = path.trace if isinstance(path, LeafPath) else np.asarray(path)
    wp, _, _ = cov.project(tr)
    runs = minimal_runs(cov, wp)
    if isinstance(path, LeafPath):
        path.box_itinerary = [r[0] for r in runs]
    return len(runs) - 1


def crossing_counts(cov: Covering, traces: np.ndarray, batch: int = 500) -> np.ndarray:
    traces = np.asarray(traces)
    n, m, _ = traces.shape
    out = []
    for a in range(0, n, batch):
        wp, _, _ = cov.project(traces[a:a + batch].reshape(-1, 3))
        keys = cov.key_array(wp).reshape(-1, m, 6)
        wp = wp.reshape(-1, m, 3)
        out.extend(len(minimal_runs(cov, w, k)) - 1 for w, k in zip(wp, keys))
    return np.array(out)


@dataclass
class HolonomyGerm:
    source: tuple
    target: tuple
    value: complex
    derivative: complex
    guaranteed_radius: float
    start_value: complex
    radii: List[float] = field(default_factory=list)
    epsilon: float = 0.1


def koebe_radius(eps: float) -> float:
    """Largest r with (1+r)/(1-r)^3 <= e^eps and (1-r)/(1+r)^3 >= e^-eps."""
    lo, hi = 0.0, 1.0
    for _ in range(80):
        r = 0.5 * (lo + hi)
        if (1 + r) / (1 - r) ** 3 <= math.exp(eps) and (1 - r) / (1 + r) ** 3 >= math.exp(-eps):
            lo = r
        else:
            hi = r
    return lo


def _transverse_vector(spec, chart, z):
    V = spec.field(chart, z)
    n = np.array([-np.conj(V[1]), np.conj(V[0])])
    return n / np.linalg.norm(n)


def holonomy_germ(cov: Covering, path: LeafPath, eps: float = 0.1, floor: float = 1e-14) -> HolonomyGerm:
    """Compose the box transition germs along the path's itinerary.

    The derivative is the product over switch points q of dt_next(q)/dt_prev(q)
    on a transverse vector.  The certified radius follows the shrinking
    scheme rho <- min(rho, R_j / Lip) with Lip = |derivative so far| e^theta, and
    is multiplied by the Koebe radius r_eps once a switch has occurred.
    """
    if cov.theta is None:
        estimate_constants(cov)
    runs = itineraries(cov, path.trace[None])[0]
    path.box_itinerary = [r[0] for r in runs]
    k0 = runs[0][0]
    t0, _ = cov.t_value(k0, path.trace[0])
    rho = cov.box(k0).transverse_radius - abs(t0)
    radii = [rho]
    if rho <= 0:
        raise NumericalError("start point lies outside its box's transversal disc")
    deriv = 1.0 + 0j
    lip = 1.0
    for (ka, _, ea), (kb, sb, _) in zip(runs[:-1], runs[1:]):
        q = path.trace[sb]
        ch = int(max_chart(q))
        xi = _transverse_vector(cov.spec, ch, to_chart(q, ch))
        ta, da = cov.t_value(ka, q, xi, ch)
        tb, db = cov.t_value(kb, q, xi, ch)
        deriv *= db / da
        lip = abs(deriv) * math.exp(cov.theta)
        R = cov.box(kb).transverse_radius - abs(tb)
        rho = min(rho, max(R, 0.0) / lip)
        radii.append(rho)
        if rho < floor:
            raise NumericalError(f"certified radius collapsed at switch {len(radii) - 1}")
    kN = runs[-1][0]
    tN, _ = cov.t_value(kN, path.trace[-1])
    radius = rho if len(runs) == 1 else koebe_radius(eps) * rho
    return HolonomyGerm(k0, kN, tN, deriv, radius, t0, radii, eps)


def germ_evaluate(cov: Covering, path: LeafPath, germ: HolonomyGerm, t: complex, **kw) -> complex:
    """Direct evaluation of the holonomy at transversal value t by tracking the leaf
    through the point of value t on the source transversal (two-leaf oracle)."""
    b0 = cov.box(germ.source)
    w = cov.point_on_transversal(germ.source, t)
    # reach the start plaque: slide the start point to its transversal and reverse that time
    tau = _slide_time(cov, germ.source, path.trace[0])
    z = to_chart(w, b0.chart)
    z, _ = flow(cov.spec, np.array([b0.chart]), z[None], np.array([-tau]))
    wp = normalize(lift(b0.chart, z[0]))
    pinned = None
    if np.all(path.charts == path.charts[0]):
        pinned = int(path.charts[0])
    lp = continue_leaf(cov.spec, ProjPoint(wp), path.time_path - path.time_path[0], chart=pinned, **kw)
    tN, _ = cov.t_value(germ.target, lp.trace[-1])
    return tN


def _slide_time(cov, key, w):
    b = cov.box(key)
    wp, _, _ = cov.project(np.atleast_2d(w))
    if np.any(cov.singular_index(np.atleast_2d(w)) >= 0):
        raise NumericalError("direct evaluation needs a start point outside the singular regions")
    z = to_chart(wp, b.chart)
    total = 0j
    for _ in range(60):
        g = hdot(z - b.center, b.vhat)
        d = -g / hdot(cov.spec.field(b.chart, z), b.vhat)
        total += complex(d[0])
        if abs(d[0]) * b.speed < 1e-15:
            break
        z, _ = flow(cov.spec, np.array([b.chart]), z, d)
    return total


def estimate_constants(cov: Covering, n: int = 400, seed: int = 0) -> Dict:
    """delta0 (Lebesgue number in |du|), theta (log of the largest transition
    derivative over sampled overlaps, padded by log 2) and rho0 (smallest box
    core in |du|) from random regular points."""
    rng = np.random.default_rng(seed)
    w = random_regular_points(cov, n, seed)
    wp, _, _ = cov.project(w)
    keys = cov.cell_keys(wp)
    deltas, cores, ratios = [], [], []
    for i, k in enumerate(keys):
        b = cov.box(k)
        z = to_chart(wp[i], b.chart)
        deltas.append((2 * b.side - np.linalg.norm(z - b.center)) / max(np.linalg.norm(cov.spec.field(b.chart, z)), 1e-300))
        cores.append(b.side / b.speed)
        # a neighbouring box containing the same point
        for _ in range(8):
            dz = rng.standard_normal(2) + 1j * rng.standard_normal(2)
            dz *= 1.5 * b.side / np.linalg.norm(dz)
            wq = normalize(lift(b.chart, z + dz))
            kq = cov.cell_keys(cov.project(wq[None])[0])[0]
            if kq != k and cov.contains(kq, wp[i][None])[0]:
                xi = _transverse_vector(cov.spec, b.chart, z)
                _, da = cov.t_value(k, wp[i], xi, b.chart)
                _, db = cov.t_value(kq, wp[i], xi, b.chart)
                ratios.append(max(abs(db / da), abs(da / db)))
                break
    cov.delta0 = float(min(deltas))
    cov.rho0 = float(min(cores))
    cov.theta = float(math.log(max(ratios)) + math.log(2)) if ratios else math.log(2)
    return {"delta0": cov.delta0, "theta": cov.theta, "rho0": cov.rho0, "overlap_samples": len(ratios)}


def build_covering(spec: FoliationSpec, kappa: float = KAPPA, calibrate: bool = True, n_calibration: int = 1000,
                   seed: int = 0, dt: float = 5e-4, n_constants: int = 400) -> Covering:
    """Covering with constants delta0, theta, rho0 and (optionally) the crossing ratio zeta.

    zeta = 1.5 times the largest Q / D1 over a calibration batch of unit-time
    leafwise Brownian segments, D1 the |du| length of the segment.
    """
    cov = Covering(spec, kappa=kappa)
    estimate_constants(cov, n_constants, seed)
    if calibrate:
        calibrate_zeta(cov, n_calibration, seed=seed + 1, dt=dt)
    return cov


def calibrate_zeta(cov: Covering, n: int = 1000, seed: int = 1, dt: float = 5e-4, safety: float = 1.5) -> float:
    Q, D = crossing_batch(cov, n, seed, dt)
    ratio = Q / D
    cov.zeta = float(safety * ratio.max())
    cov.calibration = {"paths": int(n), "seed": int(seed), "dt": dt, "safety": safety,
                       "max_ratio": float(ratio.max()), "mean_ratio": float(ratio.mean()),
                       "zeta_times_rho0": float(cov.zeta * cov.rho0) if cov.rho0 else None}
    return cov.zeta


def crossing_batch(cov: Covering, n: int, seed: int, dt: float = 5e-4, t: float = 1.0, batch: int = 500):
    """(Q, D1) for n unit-time leafwise Brownian segments from uniform regular starts."""
    Qs, Ds = [], []
    for a in range(0, n, batch):
        size = min(batch, n - a)
        w0 = random_regular_points(cov, size, seed * 1_000_003 + a)
        res = leaf_bm(cov.spec, w0, t, dt, seed=seed * 1_000_003 + a + 7, record=True, covering=cov)
        Qs.append(crossing_counts(cov, res.trace.transpose(1, 0, 2)))
        Ds.append(res.gs_length)
    return np.concatenate(Qs), np.concatenate(Ds)


# ---------------------------------------------------------------------------
# leafwise Brownian motion for |du|
# ---------------------------------------------------------------------------

@dataclass
class LeafBM:
    trace: Optional[np.ndarray]  # (m, n, 3)
    end: np.ndarray  # (n, 3)
    charts: np.ndarray
    gs_length: np.ndarray
    eta: np.ndarray
    excluded: np.ndarray
    error_proxy: float
    times: np.ndarray
    cum_length: Optional[np.ndarray] = None  # (m, n) |du| length at each recorded point
    poincare_length: Optional[np.ndarray] = None  # sum of (2 / R*) |du|, "poincare" clock only


def leaf_bm(spec: FoliationSpec, w0, t: float, dt: float = 5e-4, seed: int = 0, record: bool = False,
            covering: Optional[Covering] = None, eta: bool = False, record_every: int = 1,
            clock: str = "flat", density_every: int = 10) -> LeafBM:
    """Brownian motion of the flat leaf metric |du| (generator d^2/dx^2 + d^2/dy^2, u = x + iy).

    Each step flows the field for the complex time du = sqrt(2 dt)(N1 + i N2)
    with one RK4 step in the current max chart.  With clock="poincare", t and
    dt are hyperbolic times for the approximate density 2 / R*, so the step is
    du = R* sqrt(dt / 2)(N1 + i N2), a fixed fraction of the local radius of
    convergence; R* is refreshed every density_every steps.  Paths that enter
    the ball of radius 1e-6 r_lin around a singular point are frozen and
    flagged.
    """
    if clock not in ("flat", "poincare"):
        raise ConfigError(f"clock: expected 'flat' or 'poincare', got {clock!r}")
    w0 = normalize(np.atleast_2d(w0))
    n = w0.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    charts = max_chart(w0)
    z = np.empty((n, 2), dtype=complex)
    for c in (0, 1, 2):
        m = charts == c
        if np.any(m):
            z[m] = to_chart(w0[m], c)
    steps = max(1, int(round(t / dt)))
    dt = t / steps
    length = np.zeros(n)
    acc = np.zeros(n, dtype=complex)
    frozen = np.zeros(n, dtype=bool)
    err = 0.0
    trace = [lift_many(charts, z)] if record else None
    cum = [length.copy()] if record else None
    times = [0.0]
    sig = math.sqrt(2 * dt)
    hyp = clock == "poincare"
    plen = np.zeros(n) if hyp else None
    for k in range(steps):
        if hyp:
            if k % density_every == 0:
                Rs = taylor_radius(spec, charts, z)
                sig = Rs * math.sqrt(dt / 2)
        du = sig * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        du[frozen] = 0
        if hyp:
            plen += 2 * np.abs(du) / Rs
        z_new, _, tr = rk4_step(spec, charts, z, du, trace=eta)
        if eta:
            acc += tr
        J = jac_at(spec, charts, z) if k % 50 == 0 else None
        if J is not None:
            err += float(np.max((np.abs(du) * np.linalg.norm(J, axis=(-2, -1))) ** 5) / 120)
        z = z_new
        length += np.abs(du)
        charts, z, _, jump = switch_charts(charts, z)
        if eta:
            acc -= (spec.degree + 2) * jump
        if covering is not None and k % 10 == 0:
            frozen |= _in_excluded(covering, lift_many(charts, z))
        if record and ((k + 1) % record_every == 0 or k + 1 == steps):
            trace.append(lift_many(charts, z))
            cum.append(length.copy())
            times.append((k + 1) * dt)
    end = lift_many(charts, z)
    return LeafBM(np.array(trace) if record else None, end, charts, length, acc.real, frozen, err, np.array(times),
                  np.array(cum) if record else None, plen)


def _in_excluded(cov: Covering, w):
    out = np.zeros(w.shape[0], dtype=bool)
    for k, sd in enumerate(cov.sings):
        ch = sd.chart
        ok = np.abs(w[:, ch]) > 1e-3
        if not np.any(ok):
            continue
        z = to_chart(w[ok], ch)
        out[np.where(ok)[0]] |= cov._xi_norm(k, z) < 1e-6 * cov._rlin[k]
    return out


# ---------------------------------------------------------------------------
# separatrix loops at a singular point
# ---------------------------------------------------------------------------

def separatrix_loop(cov: Covering, index: int = 0, radius_factor: float = 1.5, tol: float = 1e-12) -> Dict:
    """Closed leaf loop around the separatrix of the first eigen-direction at a singular point.

    The loop starts on the true separatrix (fixed point of the return map of
    the loop time 2 pi i / lambda_a on the transversal through
    p + E (radius_factor r_lin, 0)), with the orientation that contracts.
    Returns the loop path, its germ, and the multiplier exp(2 pi i b / a)
    (or its inverse for the reversed orientation).
    """
    sd = cov.sings[index]
    ch = sd.chart
    p = sd.coords()
    E = cov._E[index]
    la, lb = sd.raw_eigenvalues
    mult = np.exp(2j * np.pi * lb / la)
    T = 2j * np.pi / la
    if abs(mult) > 1:
        T, mult = -T, 1 / mult
    r = radius_factor * cov._rlin[index]
    base = p + E @ np.array([r, 0])
    e2 = E[:, 1]

    def ret(s):
        z0 = base + s * e2
        lp = continue_leaf(cov.spec, ProjPoint(lift(ch, z0)), [0, T], chart=ch, tol=tol, handoff=False)
        z1 = to_chart(lp.trace[-1], ch)
        # slide back to the affine line base + C e2 along the leaf
        d = np.linalg.solve(E, z1 - p)  # eigen coordinates
        for _ in range(50):
            g = d[0] - r
            V = cov.spec.field(ch, p + E @ d)
            dv = np.linalg.solve(E, V)
            step = -g / dv[0]
            z1, _ = flow(cov.spec, np.array([ch]), (p + E @ d)[None], np.array([step]))
            d = np.linalg.solve(E, z1[0] - p)
            if abs(step) < 1e-15:
                break
        return d[1]

    s = 0j
    for _ in range(30):
        fs = ret(s) - s
        s_new = s - fs / (mult - 1)
        if abs(s_new - s) < 1e-15:
            s = s_new
            break
        s = s_new
    z0 = base + s * e2
    start = ProjPoint(lift(ch, z0))
    # loop time including the slide correction so the leaf closes
    lp0 = continue_leaf(cov.spec, start, [0, T], chart=ch, tol=tol, handoff=False)
    z1 = to_chart(lp0.trace[-1], ch)
    d = np.linalg.solve(E, z1 - p)
    tau = 0j
    for _ in range(50):
        V = cov.spec.field(ch, p + E @ d)
        step = -(d[0] - r) / np.linalg.solve(E, V)[0]
        zz, _ = flow(cov.spec, np.array([ch]), (p + E @ d)[None], np.array([step]))
        d = np.linalg.solve(E, zz[0] - p)
        tau += step
        if abs(step) < 1e-15:
            break
    loop = continue_leaf(cov.spec, start, [0, T + tau], chart=ch, tol=tol, handoff=False, max_step=0.002)
    germ = holonomy_germ(cov, loop)
    # read the return map in the source transversal coordinate
    q = loop.trace[-1]
    qc = int(max_chart(q))
    xi = _transverse_vector(cov.spec, qc, to_chart(q, qc))
    _, d_src = cov.t_value(germ.source, q, xi, qc)
    _, d_tgt = cov.t_value(germ.target, q, xi, qc)
    deriv = germ.derivative * d_src / d_tgt
    return {"path": loop, "germ": germ, "expected": complex(mult), "derivative": complex(deriv),
            "relative_error": float(abs(deriv / mult - 1)), "closure": float(np.linalg.norm(
                to_chart(loop.trace[-1], ch) - z0))}


# ---------------------------------------------------------------------------
# global Poincare-metric approximation and diagnostics
# ---------------------------------------------------------------------------

def _series_mul(a, b):
    K = a.shape[-1]
    out = np.zeros(np.broadcast_shapes(a.shape, b.shape), dtype=complex)
    for m in range(K):
        out[..., m] = (a[..., : m + 1] * b[..., m::-1]).sum(-1)
    return out


def taylor_radius(spec: FoliationSpec, charts, z, K: int = 20) -> np.ndarray:
    """Radius of convergence in complex time of the leaf through z, from the
    root test on the Taylor coefficients of the chart solution.

    Poles of the chart solution on the chart's line at infinity also limit
    this radius, so it bounds the leafwise radius from below.
    """
    z = np.atleast_2d(z)
    charts = np.atleast_1d(charts)
    n = z.shape[0]
    coef = np.zeros((n, 2, K + 1), dtype=complex)
    coef[:, :, 0] = z
    exps = spec._exps
    C = spec._coef
    for order in range(K):
        W = np.zeros((n, 3, K + 1), dtype=complex)
        for c in (0, 1, 2):
            m = charts == c
            if not np.any(m):
                continue
            i, j = [a for a in range(3) if a != c]
            W[m, i] = coef[m, 0]
            W[m, j] = coef[m, 1]
            W[m, c, 0] = 1.0
        # monomial series
        powers = {}
        F = np.zeros((n, 3, K + 1), dtype=complex)
        for col, e in enumerate(exps):
            mono = np.zeros((n, K + 1), dtype=complex)
            mono[:, 0] = 1.0
            for ax in range(3):
                for _ in range(int(e[ax])):
                    mono = _series_mul(mono, W[:, ax])
            F += C[:, col][None, :, None] * mono[:, None, :]
        V = np.zeros((n, 2, K + 1), dtype=complex)
        for c in (0, 1, 2):
            m = charts == c
            if not np.any(m):
                continue
            i, j = [a for a in range(3) if a != c]
            V[m, 0] = F[m, i] - _series_mul(W[m, i], F[m, c])
            V[m, 1] = F[m, j] - _series_mul(W[m, j], F[m, c])
        coef[:, :, order + 1] = V[:, :, order] / (order + 1)
    mag = np.log(np.maximum(np.linalg.norm(coef, axis=1), 1e-300))
    ns = np.arange(K // 2, K + 1)
    slope = np.polyfit(ns, mag[:, ns].T, 1)[0]
    return np.exp(-slope)


def poincare_density_estimate(spec, charts, z, K: int = 20) -> np.ndarray:
    """Approximate leafwise Poincare density per |du|: 2 / R*."""
    return 2.0 / taylor_radius(spec, charts, z, K)


def global_lyapunov(system="jouanolou", t: float = 5.0, N: int = 128, seed: int = 0, burn_in: float = 2.0,
                    dt: float = 2e-3, density_every: int = 10, workers=None, degree: int = 2,
                    max_steps: int = 20000, **kw):
    """Approximate Lyapunov exponent: H^{eta_m} / t_P over leafwise Brownian paths.

    The paths are Brownian for |du|; hyperbolic time accumulates as
    t_P = int (2/R*)^2 dt_s with R* from taylor_radius, and each path stops
    when t_P reaches t (after a burn-in of hyperbolic time burn_in).
    Paths still running after max_steps use the hyperbolic time reached.
    Results are approximate and reported as such.
    """
    from .dimension import closed_form
    from .hyperbolic import EstimatorReport
    spec = jouanolou(degree) if system == "jouanolou" else system
    if not isinstance(spec, FoliationSpec):
        raise ConfigError(f"unknown system {system!r}")
    cov = Covering(spec)
    w = random_regular_points(cov, N, seed)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    charts = max_chart(w)
    z = np.array([to_chart(w[i], charts[i]) for i in range(N)])
    tP = np.zeros(N)
    H = np.zeros(N)
    phase = np.zeros(N, dtype=int)  # 0 burn-in, 1 measuring, 2 done
    sig = math.sqrt(2 * dt)
    dens2 = poincare_density_estimate(spec, charts, z) ** 2
    step = 0
    while np.any(phase < 2) and step < max_steps:
        du = sig * (rng.standard_normal(N) + 1j * rng.standard_normal(N))
        du[phase == 2] = 0
        z_new, _, tr = rk4_step(spec, charts, z, du, trace=True)
        H += np.where(phase == 1, tr.real, 0.0)
        tP += np.where(phase < 2, dens2 * dt, 0.0)
        z = z_new
        charts, z, _, jump = switch_charts(charts, z)
        H -= np.where(phase == 1, (spec.degree + 2) * jump, 0.0)
        step += 1
        if step % density_every == 0:
            dens2 = poincare_density_estimate(spec, charts, z) ** 2
        start = (phase == 0) & (tP >= burn_in)
        phase[start] = 1
        tP[start] = 0.0
        phase[(phase == 1) & (tP >= t)] = 2
    unfinished = int(np.sum(phase < 2))
    measured = phase >= 1
    est = H[measured] / np.maximum(tP[measured], 1e-300)
    if est.size < 2:
        raise NumericalError("burn-in did not finish; raise max_steps")
    N = est.size
    m, se = float(est.mean()), float(est.std(ddof=1) / math.sqrt(N))
    target = float(closed_form(spec.degree).lyapunov) if spec.degree >= 2 else None
    return EstimatorReport(m, se, int(N), float(t), int(seed),
                           {"system": spec.name, "approximate": True, "target": target,
                            "band95": [m - 1.96 * se, m + 1.96 * se],
                            "negative_95": bool(m + 1.96 * se < 0), "burn_in": burn_in,
                            "unfinished_paths": unfinished, "steps": step})


def jouanolou_transversal_hits(total_time: float = 200.0, burn_in: float = 10.0, seed: int = 0, transversal: int = 0,
                               n_paths: int = 64, dt: float = 2e-3, radius: float = 1.0, max_slide: float = 1.0,
                               degree: int = 2):
    """Transversal coordinates of leafwise Brownian paths at integer hyperbolic times.

    Transversal j is the complex line through a fixed random regular point
    (seeded by j) orthogonal to the field; a hit is recorded when the path's
    leaf reaches it within complex time max_slide and lands within radius.
    """
    from .dimension import TransversalMeasureSample
    spec = jouanolou(degree)
    cov = Covering(spec)
    q = random_regular_points(cov, 1, seed=10_000 + transversal)[0]
    ch = int(max_chart(q))
    c = to_chart(q, ch)
    V = spec.field(ch, c)
    vh = V / np.linalg.norm(V)
    nrm = np.array([-np.conj(vh[1]), np.conj(vh[0])])
    w = random_regular_points(cov, n_paths, seed)
    hits = []
    tt = 0.0
    res_charts = max_chart(w)
    z = np.array([to_chart(w[i], res_charts[i]) for i in range(n_paths)])
    rng_seed = seed
    n_int = int(math.floor(total_time))
    for k in range(1, n_int + 1):
        bm = leaf_bm(spec, lift_many(res_charts, z), 1.0, dt, seed=rng_seed * 100_003 + k, clock="poincare")
        res_charts = bm.charts
        z = np.array([to_chart(bm.end[i], res_charts[i]) for i in range(n_paths)])
        if k <= burn_in:
            continue
        wq = bm.end
        ok = np.abs(wq[:, ch]) > 1e-3
        if not np.any(ok):
            continue
        zz = to_chart(wq[ok], ch)
        tau = np.zeros(zz.shape[0], dtype=complex)
        with np.errstate(all="ignore"):
            for _ in range(30):
                g = hdot(zz - c, vh)
                d = -g / hdot(spec.field(ch, zz), vh)
                d = np.where(np.isfinite(d), d, 0)
                d = np.where(np.abs(d) > 0.3, 0.3 * d / np.maximum(np.abs(d), 1e-300), d)  # damped Newton
                d = np.where(np.abs(tau) > 4 * max_slide, 0, d)
                zz, _ = flow(spec, np.full(zz.shape[0], ch), zz, d)
                tau += d
            good = np.abs(hdot(zz - c, vh)) < 1e-10
        tv = hdot(zz - c, nrm)
        sel = good & (np.abs(tv) < radius) & (np.abs(tau) <= max_slide)
        hits.extend((tv[sel] / radius).tolist())
    if not hits:
        raise NumericalError("the transversal was never hit")
    pos = np.array(hits)
    return TransversalMeasureSample(pos, np.ones(pos.size), float(total_time), float(burn_in), transversal,
                                    {"system": "jouanolou", "paths": n_paths, "radius": radius})


def integrability_samples(T: float = 50.0, N: int = 200, seed: int = 0, dt: float = 2e-3, degree: int = 2,
                          covering: Optional[Covering] = None, density_every: int = 10) -> Dict:
    """Per unit segment n < T of hyperbolic time: rho(gamma(n)), the |du|
    length, the approximate Poincare length and Q.

    The paths are the |du| Brownian motion run on the approximate hyperbolic
    clock (leaf_bm with clock="poincare"); unit segments of |du| time do not
    see the harmonic measure because the flat sectors at the singular points
    have infinite area.
    """
    spec = jouanolou(degree)
    cov = covering or Covering(spec)
    w = random_regular_points(cov, N, seed)
    rhos, lengths, plengths, Qs = [], [], [], []
    for k in range(int(T)):
        rhos.append(rho_value(cov, w))
        bm = leaf_bm(spec, w, 1.0, dt, seed=seed * 7919 + k, record=True, covering=cov, clock="poincare",
                     density_every=density_every)
        lengths.append(bm.gs_length)
        plengths.append(bm.poincare_length)
        Qs.append(crossing_counts(cov, bm.trace.transpose(1, 0, 2)))
        w = bm.end
    return {"rho": np.array(rhos), "length": np.array(lengths), "poincare_length": np.array(plengths),
            "Q": np.array(Qs)}


def rho_value(cov: Covering, w) -> np.ndarray:
    """rho = 1 + max(0, -log(|x|^2 + |y|^2)) with x = xi / r_lin inside B_p; 1 outside every B_p."""
    w = np.atleast_2d(w)
    out = np.ones(w.shape[0])
    idx = cov.singular_index(w)
    for k in np.unique(idx[idx >= 0]):
        m = idx == k
        sd = cov.sings[k]
        xi = (to_chart(w[m], sd.chart) - sd.coords()) @ cov._Einv[k].T / cov._rlin[k]
        out[m] = 1.0 + np.maximum(-np.log((np.abs(xi) ** 2).sum(-1)), 0.0)
    return out
