"""Additive cocycles along leafwise paths and the estimators built from them.

Forms:
  eta_m     log-derivative of holonomy for the normal metric |omega|
  eta_m_pr  the same for the metric pulled back from the bidisc boundary by
            the exit projection (local model only)
  beta      d log tau for a harmonic density tau
  gs_length length in the flat leaf metric |du|
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericalError
from .hyperbolic import (EstimatorReport, StepControl, disc_from_polar, distance_array, dynkin_check,
                         kernel_oracle, walk)
from .local_model import AngularDomain, LinearSingularity, angular_domain, exit_v0
from .parallel import concat, mean_stderr, run_blocks

FORMS = ("eta_m", "eta_m_pr", "beta", "gs_length")


# ---------------------------------------------------------------------------
# synthetic harmonic currents on a product box D x D
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticCurrent:
    """Density tau(z, t) = tau0(z e^{-i spin Re t}) on each plaque, tau0 positive harmonic.

    kind: constant | poisson (boundary point xi) | poisson-mixture (points,
    weights) | fourier (1 + amplitude Re(z conj(xi))).  nu: "uniform" on the
    transversal disc, or a tuple of (position, mass) atoms.
    """

    kind: str = "poisson"
    xi: complex = 1.0
    points: tuple = (1.0, complex(math.cos(2), math.sin(2)))
    weights: tuple = (0.6, 0.4)
    amplitude: float = 0.5
    spin: float = 1.0
    nu: object = "uniform"

    def __post_init__(self):
        if self.kind not in ("constant", "poisson", "poisson-mixture", "fourier"):
            raise ConfigError(f"unknown synthetic current {self.kind!r}")
        if self.kind == "fourier" and not 0 <= self.amplitude < 1:
            raise ConfigError("fourier amplitude must lie in [0, 1)")
        if self.kind == "poisson-mixture":
            if len(self.points) != len(self.weights) or min(self.weights) <= 0:
                raise ConfigError("mixture needs positive weights, one per point")
        for p in ([self.xi] if self.kind in ("poisson", "fourier") else list(self.points) if self.kind == "poisson-mixture" else []):
            if abs(abs(p) - 1) > 1e-12:
                raise ConfigError("boundary points must have modulus 1")

    @property
    def name(self) -> str:
        return self.kind

    def _rot(self, t):
        return np.exp(-1j * self.spin * np.real(t))

    @staticmethod
    def _omz(z, omz):
        return 1 - np.abs(z) ** 2 if omz is None else omz

    def tau(self, z, t=0.0, omz=None):
        return np.exp(self.log_tau(z, t, omz))

    def log_tau(self, z, t=0.0, omz=None):
        z = np.asarray(z, dtype=complex)
        zr = z * self._rot(t)
        om = self._omz(z, omz)
        if self.kind == "constant":
            return np.zeros(z.shape)
        if self.kind == "poisson":
            return np.log(om) - 2 * np.log(np.abs(self.xi - zr))
        if self.kind == "fourier":
            return np.log1p(self.amplitude * (zr * np.conj(self.xi)).real)
        terms = [math.log(w) + np.log(om) - 2 * np.log(np.abs(p - zr)) for p, w in zip(self.points, self.weights)]
        return np.logaddexp.reduce(np.array(terms), axis=0)

    def dlog(self, z, t=0.0, omz=None):
        """d/dz log tau (z-derivative in the plaque coordinate)."""
        z = np.asarray(z, dtype=complex)
        rot = self._rot(t)
        zr = z * rot
        om = self._omz(z, omz)
        if self.kind == "constant":
            return np.zeros(z.shape, dtype=complex)
        if self.kind == "poisson":
            return -np.conj(z) / om + rot / (self.xi - zr)
        if self.kind == "fourier":
            return self.amplitude * np.conj(self.xi) * rot / (2 * (1 + self.amplitude * (zr * np.conj(self.xi)).real))
        logs = np.array([math.log(w) + np.log(om) - 2 * np.log(np.abs(p - zr)) for p, w in zip(self.points, self.weights)])
        share = np.exp(logs - np.logaddexp.reduce(logs, axis=0))
        parts = np.array([rot / (p - zr) for p in self.points])
        return -np.conj(z) / om + (share * parts).sum(axis=0)

    # evaluation in the frame of a walk started at x: z = m(w), m(w) = (w + x)/(1 + conj(x) w),
    # w = tanh(r/2) e^{i phi}.  Poisson kernels become Poisson kernels at eta = m^{-1}(xi), and
    # |eta - w| = |1 - tanh(r/2) e^{i(phi - arg eta)}| is evaluated without cancellation.

    def _frame_poisson(self, r, phi, x, t):
        """List of (log weight, log P_eta(w), d/dw log P_eta(w)) for each boundary point."""
        if self.kind == "poisson":
            pts, wts = [self.xi], [1.0]
        else:
            pts, wts = list(self.points), list(self.weights)
        conj_rot = np.conj(self._rot(t))
        th = np.tanh(r / 2)
        one_th = 2 / (np.exp(r) + 1)
        log_omw = -2 * np.log(np.cosh(r / 2))
        out = []
        for p, w in zip(pts, wts):
            xi = p * conj_rot
            eta = (xi - x) / (1 - np.conj(x) * xi)
            delta = phi - np.angle(eta)
            re = one_th + 2 * th * np.sin(delta / 2) ** 2
            one_c = re - 1j * th * np.sin(delta)  # 1 - th e^{i delta}
            log_px = math.log(1 - abs(x) ** 2) - 2 * math.log(abs(xi - x)) if x != 0 else 0.0
            logp = log_omw - np.log(np.abs(one_c) ** 2)
            dlog = np.conj(one_c) * np.cosh(r / 2) ** 2 / (np.exp(1j * np.angle(eta)) * one_c)
            out.append((math.log(w) + log_px, logp, dlog))
        return out

    def frame_log_tau(self, r, phi, x=0j, t=0.0):
        r, phi = np.asarray(r, float), np.asarray(phi, float)
        if self.kind == "constant":
            return np.zeros(r.shape)
        if self.kind == "fourier":
            from .hyperbolic import disc_from_polar
            z, omz = disc_from_polar(r, phi, x)
            return self.log_tau(z, t, omz)
        terms = [lw + lp for lw, lp, _ in self._frame_poisson(r, phi, x, t)]
        return np.logaddexp.reduce(np.array(terms), axis=0)

    def frame_dlog(self, r, phi, x=0j, t=0.0):
        """d/dw log(tau o m) at w = tanh(r/2) e^{i phi}."""
        r, phi = np.asarray(r, float), np.asarray(phi, float)
        if self.kind == "constant":
            return np.zeros(r.shape, dtype=complex)
        if self.kind == "fourier":
            from .hyperbolic import disc_from_polar
            z, omz = disc_from_polar(r, phi, x)
            w = np.tanh(r / 2) * np.exp(1j * phi)
            return self.dlog(z, t, omz) * (1 - abs(x) ** 2) / (1 + np.conj(x) * w) ** 2
        parts = self._frame_poisson(r, phi, x, t)
        logs = np.array([lw + lp for lw, lp, _ in parts])
        share = np.exp(logs - np.logaddexp.reduce(logs, axis=0))
        return (share * np.array([d for _, _, d in parts])).sum(axis=0)

    def grad_norm_sq(self, z, t=0.0, omz=None):
        """|grad log tau|^2 in the metric 2|dz|/(1-|z|^2)."""
        om = self._omz(np.asarray(z), omz)
        return (om * np.abs(self.dlog(z, t, om))) ** 2

    def laplacian_log(self, z, t=0.0, omz=None):
        """Laplacian of log tau; equals -|grad log tau|^2 because tau is harmonic."""
        return -self.grad_norm_sq(z, t, omz)

    def sample_nu(self, rng, n):
        if isinstance(self.nu, str):
            if self.nu != "uniform":
                raise ConfigError(f"unknown transverse measure {self.nu!r}")
            return np.sqrt(rng.uniform(0, 1, n)) * np.exp(2j * np.pi * rng.uniform(0, 1, n))
        pos = np.array([a[0] for a in self.nu], dtype=complex)
        mass = np.array([a[1] for a in self.nu], dtype=float)
        return pos[rng.choice(len(pos), n, p=mass / mass.sum())]

    def harnack_check(self, n: int = 100_000, seed: int = 0, rtol: float = 1e-12) -> Dict:
        """Count violations of e^{-d(z,w)} <= tau(z)/tau(w) <= e^{d(z,w)} over random triples."""
        rng = np.random.default_rng(seed)
        # radii pushed towards the boundary, where the bound is tight
        def pts():
            rad = 1 - np.exp(-rng.uniform(0, 12, n))
            return rad * np.exp(2j * np.pi * rng.uniform(0, 1, n))
        z, w = pts(), pts()
        t = rng.uniform(-np.pi, np.pi, n)
        d = distance_array("disc", z, w)
        lr = self.log_tau(z, t) - self.log_tau(w, t)
        slack = rtol * np.maximum(1.0, d)
        viol = int(np.sum(np.abs(lr) > d + slack))
        return {"current": self.name, "n": n, "violations": viol,
                "max_excess": float(np.max(np.abs(lr) - d))}

    def mean_value_check(self, n_circles: int = 20, seed: int = 0, nodes: int = 256) -> float:
        """Largest relative error of the circle-mean property of tau over random circles."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        ang = 2 * np.pi * np.arange(nodes) / nodes
        for _ in range(n_circles):
            c = 0.6 * math.sqrt(rng.uniform()) * np.exp(2j * np.pi * rng.uniform())
            rad = (1 - abs(c)) * rng.uniform(0.1, 0.9)
            t = rng.uniform(-np.pi, np.pi)
            m = self.tau(c + rad * np.exp(1j * ang), t).mean()
            worst = max(worst, abs(m / self.tau(c, t) - 1))
        return float(worst)


BUILTIN_CURRENTS = {
    "constant": SyntheticCurrent("constant"),
    "poisson": SyntheticCurrent("poisson"),
    "poisson-mixture": SyntheticCurrent("poisson-mixture"),
    "fourier": SyntheticCurrent("fourier"),
}


def synthetic_current(name: str) -> SyntheticCurrent:
    if name not in BUILTIN_CURRENTS:
        raise ConfigError(f"unknown synthetic current {name!r}; choose from {sorted(BUILTIN_CURRENTS)}")
    return BUILTIN_CURRENTS[name]


# ---------------------------------------------------------------------------
# cocycles on the local model leaf
# ---------------------------------------------------------------------------

@dataclass
class LocalLeafContext:
    """The leaf of a linear singularity, parametrized by u in the angular domain A,
    with an optional synthetic density carried to A by the uniformization A -> disc."""

    s: LinearSingularity
    current: Optional[SyntheticCurrent] = None
    transverse: float = 0.0

    def __post_init__(self):
        self.dom: AngularDomain = angular_domain(self.s)
        self.k = np.pi / self.dom.opening

    def to_disc(self, u):
        h = 1j * self.dom.to_standard(u) ** self.k
        return (h - 1j) / (h + 1j)

    def from_disc(self, w):
        w = np.asarray(w, dtype=complex)
        h = 1j * (1 + w) / (1 - w)
        return (-1j * h) ** (1 / self.k) * np.exp(1j * self.dom.bisector)

    def potential(self, form: str, u):
        """A primitive of the form along the leaf (all forms but gs_length are exact)."""
        u = np.asarray(u, dtype=complex)
        ab = self.s.a + self.s.b
        if form == "eta_m":
            return (ab * u).real
        if form == "eta_m_pr":
            return (ab * (exit_v0(self.s, u) + 1j * u.imag)).real
        if form == "beta":
            if self.current is None:
                raise ConfigError("beta needs a synthetic current")
            return self.current.log_tau(self.to_disc(u), self.transverse)
        raise ConfigError(f"form {form!r} has no primitive")


@dataclass
class CocycleSample:
    path_id: int
    t: float
    values: Dict[str, float]
    seed: int


def _cocycle_values(form, u, ctx):
    """H along each path; u has shape (n_points, ...) with time along axis 0."""
    if form == "gs_length":
        return np.abs(np.diff(u, axis=0)).sum(axis=0)
    if form not in FORMS:
        raise ConfigError(f"unknown form {form!r}")
    if isinstance(ctx, LocalLeafContext):
        return ctx.potential(form, u[-1]) - ctx.potential(form, u[0])
    if isinstance(ctx, SyntheticCurrent):
        if form != "beta":
            raise ConfigError(f"form {form!r} needs metric data that a synthetic current lacks")
        return ctx.log_tau(u[-1]) - ctx.log_tau(u[0])
    raise ConfigError("missing cocycle context")


def integrate_cocycle(form: str, path, context=None, path_id: int = 0, seed: int = 0) -> CocycleSample:
    """H_t of a form along a path: an array of leaf coordinates (u for the local
    model, z for a synthetic plaque), a BMPath, or a global LeafPath."""
    if hasattr(path, "cocycle"):
        return CocycleSample(path_id, float(path.duration), {form: float(path.cocycle(form))}, seed)
    if hasattr(path, "coordinates"):
        t = float(path.times[-1])
        pts = path.coordinates
        seed = getattr(path, "seed", seed)
    else:
        pts = np.asarray(path, dtype=complex)
        t = float(len(pts) - 1)
    if context is None:
        raise ConfigError("missing cocycle context")
    if isinstance(context, LocalLeafContext) and not np.all(context.dom.contains(pts, closed=True)):
        raise ConfigError("path leaves the angular domain")
    if isinstance(context, SyntheticCurrent) and np.any(np.abs(pts) >= 1):
        raise ConfigError("path leaves the plaque")
    if pts.size == 0:
        raise ConfigError("empty path")
    return CocycleSample(path_id, t, {form: float(_cocycle_values(form, pts, context))}, seed)


def local_leaf_paths(ctx: LocalLeafContext, u0: complex, t: float, n_paths: int, seed: int,
                     step: StepControl = StepControl(dt=0.01)) -> np.ndarray:
    """Brownian paths of the sector's Poincare metric from u0, as an array (n_times, n_paths) of u."""
    z0 = complex(ctx.to_disc(u0))
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    res = walk(rng, n_paths, t, step, start=z0, record_every=1)
    u = ctx.from_disc(res.trace)
    u[0] = u0
    return u


def additivity_check(ctx, paths: np.ndarray, split: Optional[int] = None, forms: Sequence[str] = FORMS) -> Dict:
    """Largest |H(whole) - H(first part) - H(shifted second part)| over paths, per form."""
    m = paths.shape[0]
    k = m // 2 if split is None else split
    out = {}
    for f in forms:
        whole = _cocycle_values(f, paths, ctx)
        head = _cocycle_values(f, paths[:k + 1], ctx)
        tail = _cocycle_values(f, paths[k:], ctx)
        err = np.abs(whole - head - tail)
        out[f] = float(err.max() / max(1.0, np.abs(whole).max()))
    return out


# ---------------------------------------------------------------------------
# identity checks on a synthetic plaque
# ---------------------------------------------------------------------------

def _identity_block(rng, size, current, x, t, step):
    lap = lambda z, omz: current.laplacian_log(z, 0.0, omz)
    w = walk(rng, size, t, step, start=x, integrands={"lap": lap})
    z, omz = disc_from_polar(w.r, w.phi, x)
    lhs = current.log_tau(z, 0.0, omz) - current.log_tau(np.array([x]), 0.0)
    return lhs, w.integrals["lap"]


def cocycle_identity_check(current: SyntheticCurrent, x: complex = 0j, t: float = 2.0, N: int = 20000,
                           seed: int = 0, step: StepControl = StepControl(dt=0.002), c=None,
                           workers=None) -> Dict:
    """E log(tau(X_t)/tau(x)) = c E int_0^t Laplacian(log tau)(X_s) ds, c from dynkin_check."""
    x = complex(x)
    if abs(x) >= 1:
        raise ConfigError("x must lie in the plaque")
    if c is None:
        cal = dynkin_check("log_density", x, t, N, seed + 1, step, workers)
        c, c_se = cal.estimate, cal.stderr
    else:
        c, c_se = (c.estimate, c.stderr) if isinstance(c, EstimatorReport) else (float(c), 0.0)
    res = run_blocks(_identity_block, N, seed, workers, current=current, x=x, t=t, step=step)
    Y, Z = concat(res, N, 0), concat(res, N, 1)
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(Z))):
        raise NumericalError("tau evaluation failed near the plaque boundary")
    lhs, lhs_se = mean_stderr(Y)
    rhs, rhs_se = mean_stderr(Z)
    disc = lhs - c * rhs
    se = math.sqrt(np.var(Y - c * Z, ddof=1) / N + (rhs * c_se) ** 2)
    ok = abs(disc) <= 3 * se if se > 0 else abs(disc) < 1e-12
    return {"current": current.name, "x": [x.real, x.imag], "t": t, "n": N, "seed": seed,
            "lhs": lhs, "rhs": rhs, "c": c, "c_stderr": c_se, "discrepancy": disc,
            "combined_stderr": se, "pass": bool(ok)}


def _hr_block(rng, size, current, x, times, step):
    """Per-path -log q and log(tau(X_s)/tau(x)) at each time s under the Doob-transformed walk."""
    drift = lambda r, phi: current.frame_dlog(r, phi, x)
    res = walk(rng, size, times[-1], step, start=x, drift=drift, checkpoints=times[:-1])
    r_at, phi_at = dict(res.r_at), dict(res.phi_at)
    r_at[times[-1]], phi_at[times[-1]] = res.r, res.phi
    ltx = float(current.log_tau(np.array([x]))[0])
    out = []
    for s in times:
        logw = current.frame_log_tau(r_at[s], phi_at[s], x) - ltx
        # the walk's radius is the distance from the start point
        logp = kernel_oracle(float(s)).log_p(r_at[s])
        out.append(np.stack([-(logp + logw), logw]))
    return np.array(out)  # (n_times, 2, size)


def hR_check(current: SyntheticCurrent, x: complex = 0j, t: float = 20.0, N: int = 20000, seed: int = 0,
             step: StepControl = StepControl(dt=0.01), workers=None) -> Dict:
    """Entropy rate h_R of the tau-weighted transition densities q = p tau(y)/tau(x).

    q is the law of the Doob transform of Brownian motion by tau, which is
    simulated directly.  With G(s) = E_q[-log q(X_s)], the second difference
    (G(t) - 2 G(t/2) + G(t/4)) / (t/4) estimates the rate as plane_entropy
    does.  The same difference of E_q[log tau(X_s)/tau(x)] estimates h_D.
    """
    x = complex(x)
    if not t > 0 or N < 2:
        raise ConfigError("need t > 0 and N >= 2")
    times = (t / 4, t / 2, t)
    res = run_blocks(_hr_block, N, seed, workers, current=current, x=x, times=times, step=step)
    arr = np.concatenate(res, axis=2)[:, :, :N]
    if not np.all(np.isfinite(arr)):
        raise NumericalError("kernel or density evaluation failed")
    sec = (arr[2] - 2 * arr[1] + arr[0]) / (t / 4)
    hr, hr_se = mean_stderr(sec[0])
    hd, hd_se = mean_stderr(sec[1])
    ratio, ratio_se = mean_stderr(arr[2, 0] / t)
    return {"current": current.name, "x": [x.real, x.imag], "t": t, "n": N, "seed": seed,
            "estimate": hr, "stderr": hr_se, "h_D": hd, "h_D_stderr": hd_se,
            "finite_time_ratio": ratio, "finite_time_ratio_stderr": ratio_se,
            "pass": bool(hr >= -3 * hr_se)}


# ---------------------------------------------------------------------------
# leaf entropy from separated sets
# ---------------------------------------------------------------------------

def _sinh2_half(r1, p1, r2, p2, period=None):
    """sinh^2(d/2) between polar points; with a period the angle difference is
    taken to its minimal image (distance in the rotation quotient)."""
    dphi = p1 - p2
    if period is not None:
        dphi = np.mod(dphi + period / 2, period) - period / 2
    return np.sinh((r1 - r2) / 2) ** 2 + np.sinh(r1) * np.sinh(r2) * np.sin(dphi / 2) ** 2


def greedy_net(r, phi, C: float, period=None) -> np.ndarray:
    """Centers of a greedy C-net in input order; returns the cell index of every point
    (nearest center)."""
    thr = math.sinh(C / 2) ** 2
    cr = np.empty(0)
    cp = np.empty(0)
    for i in range(len(r)):
        if cr.size == 0 or np.min(_sinh2_half(r[i], phi[i], cr, cp, period)) > thr:
            cr = np.append(cr, r[i])
            cp = np.append(cp, phi[i])
    cells = np.empty(len(r), dtype=int)
    chunk = max(1, 4_000_000 // max(cr.size, 1))
    for a in range(0, len(r), chunk):
        d = _sinh2_half(r[a:a + chunk, None], phi[a:a + chunk, None], cr[None], cp[None], period)
        cells[a:a + chunk] = np.argmin(d, axis=1)
    return cells


def half_mass_cells(r, phi, C: float = 1.0, fold: bool = True, per_cell: int = 40) -> Tuple[int, int]:
    """Number of C-net cells holding the top half of the empirical mass, and the fold order M.

    For rotation-invariant laws the endpoints are folded into the quotient by
    rotations of angle 2 pi / M, with M chosen so that a wedge out to the
    median radius spans about N / per_cell cells; the count is multiplied by M.
    """
    r = np.asarray(r, float)
    phi = np.asarray(phi, float)
    n = r.size
    M = 1
    if fold:
        r_med = float(np.median(r))
        M = max(1, int(2 * np.pi * math.sinh(r_med) / (C * n / per_cell)))
    period = 2 * np.pi / M if M > 1 else None
    cells = greedy_net(r, np.mod(phi, 2 * np.pi / M) if M > 1 else phi, C, period)
    mass = np.sort(np.bincount(cells))[::-1]
    k = int(np.searchsorted(np.cumsum(mass), n / 2) + 1)
    return k * M, M


def hL_separated(endpoints: Mapping[int, object], C: float = 1.0, fold: bool = True, per_cell: int = 40) -> Dict:
    """Exponential growth rate in n of the half-mass cell count of time-n endpoints.

    endpoints: n -> (r, phi) arrays of polar coordinates about the start point,
    or complex disc coordinates.
    """
    ns = sorted(endpoints)
    if len(ns) < 3:
        raise ConfigError("need at least three distinct times")
    counts, folds = [], []
    for n in ns:
        e = endpoints[n]
        if isinstance(e, tuple):
            r, phi = e
        else:
            z = np.asarray(e, dtype=complex)
            r, phi = 2 * np.arctanh(np.abs(z)), np.angle(z)
        k, M = half_mass_cells(r, phi, C, fold, per_cell)
        counts.append(k)
        folds.append(M)
    rate = float(np.polyfit(ns, np.log(counts), 1)[0])
    return {"n": ns, "counts": counts, "folds": folds, "C": C, "rate": rate}


def plane_endpoints(ns: Sequence[int], total: int = 100_000, seed: int = 0, step: StepControl = StepControl(),
                    workers=None) -> Dict[int, tuple]:
    """Endpoints at time n of total/n Brownian paths from the disc origin."""
    from .hyperbolic import endpoints as _endpoints
    return {int(n): _endpoints(float(n), max(2, total // int(n)), seed + int(n), step, workers=workers) for n in ns}


# ---------------------------------------------------------------------------
# Lyapunov exponents
# ---------------------------------------------------------------------------

def _product_block(rng, size, t, step, amplitude, x):
    w = walk(rng, size, t, step, start=x)
    z, _ = disc_from_polar(w.r, w.phi, x)
    return amplitude * (z.real - x.real)


def lyapunov_estimate(system: str = "product", t: float = 10.0, N: int = 4096, seed: int = 0,
                      step: StepControl = StepControl(), workers=None, amplitude: float = 0.5,
                      **kwargs) -> EstimatorReport:
    """Mean of H_t/t for the normal-metric cocycle over N Brownian paths.

    product: a product foliation whose normal metric is e^{amplitude Re z}|dt|
        on each plaque, so eta_m is exact and the exponent is 0.
    jouanolou (or a global spec): see folialab.leaves.global_lyapunov.
    """
    if not (t > 0 and N > 0):
        raise ConfigError("t and N must be positive")
    if system == "product":
        H = concat(run_blocks(_product_block, N, seed, workers, t=t, step=step, amplitude=amplitude, x=0j), N)
        est, se = mean_stderr(H / t)
        return EstimatorReport(est, se, int(N), float(t), int(seed), {"system": "product", "target": 0.0})
    from .leaves import global_lyapunov
    return global_lyapunov(system, t=t, N=N, seed=seed, workers=workers, **kwargs)


def _running_mean_stability(series: np.ndarray) -> Tuple[np.ndarray, float]:
    """Running mean over time of the per-time path averages, and its largest
    relative deviation from the final value over the last half."""
    per_time = series.mean(axis=1)
    run = np.cumsum(per_time) / np.arange(1, per_time.size + 1)
    half = run[run.size // 2:]
    dev = float(np.max(np.abs(half / run[-1] - 1))) if run[-1] != 0 else float("inf")
    return run, dev


def integrability_diag(system: str = "jouanolou", T: float = 50.0, N: int = 200, seed: int = 0, dt: float = 2e-3,
                       tol: float = 0.10, samples: Optional[Dict] = None) -> Dict:
    """Empirical integrability diagnostics along leafwise Brownian paths.

    Reports distributions and running Birkhoff means of rho(gamma(n)), of the
    |du| length of unit segments (its sup over u <= 1 is the segment length)
    and of Q; flags a running mean that moves by more than tol over the last
    half.  The rough bound D1_s <= c' rho(gamma(0)) exp(c D1_P) is fitted on
    half the paths and checked on the other half.
    """
    if system != "jouanolou":
        raise ConfigError(f"integrability diagnostics need a global system, got {system!r}")
    from .leaves import integrability_samples
    s = samples if samples is not None else integrability_samples(T=T, N=N, seed=seed, dt=dt)
    rho, Ds, DP, Q = s["rho"], s["length"], s["poincare_length"], s["Q"]
    out: Dict = {"system": system, "T": float(T), "N": int(rho.shape[1]), "seed": int(seed), "dt": dt}
    for name, arr in (("rho", rho), ("length", Ds), ("Q", Q)):
        run, dev = _running_mean_stability(arr.astype(float))
        out[name] = {"mean": float(arr.mean()), "quantiles": np.quantile(arr, [0.5, 0.9, 0.99, 1.0]).tolist(),
                     "running_mean": run.tolist(), "last_half_deviation": dev, "stable": bool(dev <= tol)}
    out["heavy_tail_flag"] = not (out["rho"]["stable"] and out["Q"]["stable"])
    out["never_entered_singular_regions_rho_max"] = float(rho[:, np.all(rho == 1.0, axis=0)].max()) \
        if np.any(np.all(rho == 1.0, axis=0)) else None
    # fit-then-verify of the rough bound
    y = np.log(Ds / rho)
    x = DP
    half = rho.shape[1] // 2
    xf, yf = x[:, :half].ravel(), y[:, :half].ravel()
    c = max(0.0, float(np.polyfit(xf, yf, 1)[0])) if xf.size > 2 else 0.0
    log_cp = float(np.max(yf - c * xf) + math.log(1.25))
    viol = int(np.sum(y[:, half:] > log_cp + c * x[:, half:]))
    out["rough_bound"] = {"c": c, "c_prime": math.exp(log_cp), "fit_segments": int(xf.size),
                          "held_out_segments": int(y[:, half:].size), "violations": viol,
                          "poincare_metric": "approximate (2 / R*)"}
    return out
