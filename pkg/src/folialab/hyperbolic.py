"""Hyperbolic plane of curvature -1: metric, distance, Brownian motion, heat kernel.

Models: the disc with density 2/(1-|z|^2), the upper half-plane with density
1/Im z, and the sector {|arg z| < opening/2} with the metric pulled back by
z -> i z^(pi/opening).

Brownian motion has generator the full Laplace-Beltrami operator.  It is
simulated as a geodesic random walk: each step is an isotropic Gaussian
tangent vector of covariance 2 dt per coordinate, taken at the current point.
The state is kept as (distance, angle) relative to the start point, so points
far out towards the boundary lose no precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, interpolate

from .errors import ConfigError, NumericalError, ToleranceError
from .parallel import concat, mean_stderr, run_blocks

MODELS = ("disc", "half-plane", "sector")


# ---------------------------------------------------------------------------
# points and model maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HypPoint:
    model: str
    coordinate: complex
    opening: Optional[float] = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.model == "sector":
            if self.opening is None or not (0 < self.opening <= 2 * np.pi):
                raise ConfigError("sector model needs an opening in (0, 2 pi]")
        object.__setattr__(self, "coordinate", complex(self.coordinate))
        if not _inside(self.model, self.coordinate, self.opening):
            raise ConfigError(f"{self.coordinate} is not inside the {self.model} model")

    def same_model(self, other: "HypPoint") -> bool:
        return self.model == other.model and self.opening == other.opening


def _inside(model, z, opening=None):
    z = np.asarray(z)
    if model == "disc":
        return bool(np.all(np.abs(z) < 1))
    if model == "half-plane":
        return bool(np.all(z.imag > 0))
    return bool(np.all((np.abs(np.angle(z)) < opening / 2) & (z != 0)))


def disc(z) -> HypPoint:
    return HypPoint("disc", z)


def to_half_plane(model, z, opening=None):
    """Isometry from the model to the upper half-plane."""
    z = np.asarray(z, dtype=complex)
    if model == "half-plane":
        return z
    if model == "disc":
        return 1j * (1 + z) / (1 - z)
    return 1j * z ** (np.pi / opening)


def from_half_plane(model, h, opening=None):
    h = np.asarray(h, dtype=complex)
    if model == "half-plane":
        return h
    if model == "disc":
        return (h - 1j) / (h + 1j)
    return (-1j * h) ** (opening / np.pi)


def mobius_disc(z, a, phase=1.0):
    """Disc automorphism z -> phase (z - a) / (1 - conj(a) z)."""
    z = np.asarray(z, dtype=complex)
    return phase * (z - a) / (1 - np.conj(a) * z)


def poincare_density(point: HypPoint) -> float:
    """Conformal factor of the curvature -1 metric at the point."""
    z = point.coordinate
    if point.model == "disc":
        return 2.0 / (1.0 - abs(z) ** 2)
    if point.model == "half-plane":
        return 1.0 / z.imag
    k = np.pi / point.opening
    w = z ** k
    return float(k * abs(z) ** (k - 1) / w.real)


def density_array(model, z, opening=None) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    if model == "disc":
        return 2.0 / (1.0 - np.abs(z) ** 2)
    if model == "half-plane":
        return 1.0 / z.imag
    k = np.pi / opening
    return k * np.abs(z) ** (k - 1) / (z ** k).real


def _half_plane_distance(z, w):
    z, w = np.asarray(z, dtype=complex), np.asarray(w, dtype=complex)
    return 2.0 * np.arctanh(np.abs(z - w) / np.abs(z - np.conj(w)))


def distance_array(model, z, w, opening=None) -> np.ndarray:
    z, w = np.asarray(z, dtype=complex), np.asarray(w, dtype=complex)
    if model == "disc":
        return 2.0 * np.arctanh(np.abs(z - w) / np.abs(1 - np.conj(z) * w))
    return _half_plane_distance(to_half_plane(model, z, opening), to_half_plane(model, w, opening))


def hyp_distance(z: HypPoint, w: HypPoint) -> float:
    if not z.same_model(w):
        raise ConfigError("points live in different models")
    return float(distance_array(z.model, z.coordinate, w.coordinate, z.opening))


# ---------------------------------------------------------------------------
# geodesic random walk
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepControl:
    """dt: base hyperbolic time step; refine: each base step is split into
    2**refine substeps by Brownian-bridge subdivision of the same Gaussian
    increment, so refinements are coupled path by path; cap: largest
    hyperbolic length of a single substep.

    In disc coordinates at z the Euclidean step is sqrt(2 dt) (1 - |z|^2)/2,
    i.e. hyperbolic time dt = density^2 * Euclidean time.
    """

    dt: float = 0.01
    refine: int = 0
    cap: float = 2.0
    max_steps: int = 10_000_000

    def __post_init__(self):
        if not (self.dt > 0 and self.cap > 0):
            raise ConfigError("dt and cap must be positive")
        if self.refine < 0:
            raise ConfigError("refine must be >= 0")

    @property
    def substep(self) -> float:
        return self.dt / 2 ** self.refine

    def halved(self) -> "StepControl":
        return StepControl(self.dt, self.refine + 1, self.cap, self.max_steps)


def _bridge_split(g, levels, rng):
    """Split standard-normal increments g (shape (2, n)) of one step into
    2**levels conditionally exact sub-increments, each standard-normal after
    rescaling by sqrt(2**levels)."""
    inc = g[None]
    for _ in range(levels):
        m = inc.shape[0]
        z = rng.standard_normal(inc.shape)
        # halves of an increment with variance v: I/2 +- sqrt(v)/2 Z, v = 1 / m
        dev = z * math.sqrt(1.0 / m) / 2
        left, right = inc / 2 + dev, inc / 2 - dev
        inc = np.stack([left, right], axis=1).reshape((2 * m,) + g.shape)
    return inc * math.sqrt(inc.shape[0])


def _step_radius(r, s, psi):
    """New distance from the origin after a geodesic step of length s at angle psi
    from the outward radial direction, and the angle swept at the origin."""
    ch_s = np.cosh(s)
    # 2 sinh^2(r'/2) = 2 sinh^2(r/2) cosh s + 2 sinh^2(s/2) + sinh r sinh s cos psi
    x = 2 * np.sinh(r / 2) ** 2 * ch_s + 2 * np.sinh(s / 2) ** 2 + np.sinh(r) * np.sinh(s) * np.cos(psi)
    r_new = 2 * np.arcsinh(np.sqrt(np.maximum(x, 0.0) / 2))
    sh_new = np.sinh(r_new)
    with np.errstate(invalid="ignore", divide="ignore"):
        sin_d = np.sinh(s) * np.sin(psi) / sh_new
        cos_d = (np.cosh(r) * np.cosh(r_new) - ch_s) / (np.sinh(r) * sh_new)
    delta = np.arctan2(sin_d, cos_d)
    at_origin = r < 1e-12
    delta = np.where(at_origin, psi, delta)
    delta = np.where(sh_new < 1e-300, 0.0, delta)
    return r_new, delta


@dataclass
class WalkResult:
    r: np.ndarray
    phi: np.ndarray
    integrals: Dict[str, np.ndarray]
    times: np.ndarray
    trace: Optional[np.ndarray] = None  # (n_record, n_paths) complex disc coordinates
    r_at: Dict[float, np.ndarray] = field(default_factory=dict)
    phi_at: Dict[float, np.ndarray] = field(default_factory=dict)


def disc_from_polar(r, phi, start: complex = 0j):
    """Disc coordinate and 1 - |z|^2 for the point at (r, phi) relative to start."""
    th = np.tanh(r / 2)
    w = th * np.exp(1j * phi)
    one_w = 1.0 / np.cosh(r / 2) ** 2
    if start == 0:
        return w, one_w
    z = (w + start) / (1 + np.conj(start) * w)
    omz = (1 - abs(start) ** 2) * one_w / np.abs(1 + np.conj(start) * w) ** 2
    return z, omz


def walk(rng, n: int, t: float, step: StepControl = StepControl(), start: complex = 0j,
         integrands: Optional[Dict[str, Callable]] = None, track_angle: bool = True,
         record_every: int = 0, checkpoints: Sequence[float] = (),
         drift: Optional[Callable] = None) -> WalkResult:
    """Simulate n independent walks for hyperbolic time t from a disc point.

    integrands: name -> f(z, one_minus_abs2) whose left-point time integrals
    are accumulated along each path.  checkpoints: times (rounded to the base
    grid) at which the distance and angle from the start are stored.
    drift(r, phi): d/dw of a real function f in the recentered frame; the
    generator becomes Laplacian + 2 <grad f, grad .>, the Doob transform by
    e^f when e^f is harmonic.
    """
    if not t > 0:
        raise ConfigError("t must be positive")
    nbase = max(1, int(math.ceil(t / step.dt - 1e-9)))
    nsub = 2 ** step.refine
    if nbase * nsub > step.max_steps:
        raise NumericalError(f"step budget exhausted: {nbase * nsub} steps needed, max {step.max_steps}")
    if drift is not None:
        track_angle = True
    bridge_rng = rng.spawn(1)[0]
    dt = t / (nbase * nsub)
    marks = {int(round(c / t * nbase)): c for c in checkpoints}
    r = np.zeros(n)
    phi = np.zeros(n)
    acc = {k: np.zeros(n) for k in (integrands or {})}
    sig = math.sqrt(2 * dt)
    trace = []
    times = [0.0]
    r_at, phi_at = {}, {}
    if record_every:
        trace.append(disc_from_polar(r, phi, start)[0])
    k = 0
    for kb in range(nbase):
        g = rng.standard_normal((2, n))
        subs = _bridge_split(g, step.refine, bridge_rng) if nsub > 1 else g[None]
        for gs in subs:
            if integrands:
                z, omz = disc_from_polar(r, phi, start)
                for name, f in integrands.items():
                    acc[name] += f(z, omz) * dt
            if drift is None:
                s = np.minimum(sig * np.hypot(gs[0], gs[1]), step.cap)
                psi = np.arctan2(gs[1], gs[0])
            else:
                vr, vt = _drift_frame(drift, r, phi, dt)
                vr, vt = sig * gs[0] + vr, sig * gs[1] + vt
                s = np.minimum(np.hypot(vr, vt), step.cap)
                psi = np.arctan2(vt, vr)
            r, delta = _step_radius(r, s, psi)
            if track_angle:
                phi = phi + delta
            k += 1
            if record_every and (k % record_every == 0 or k == nbase * nsub):
                trace.append(disc_from_polar(r, phi, start)[0])
                times.append(k * dt)
        if kb + 1 in marks:
            r_at[marks[kb + 1]] = r.copy()
            phi_at[marks[kb + 1]] = np.mod(phi, 2 * np.pi)
    return WalkResult(r, np.mod(phi, 2 * np.pi), acc, np.array(times),
                      np.array(trace) if record_every else None, r_at, phi_at)


def _drift_frame(drift, r, phi, dt):
    """2 dt grad f as (outward radial, angular) components in the walk's frame.

    drift(r, phi) returns d/dw f in the recentered coordinate w = tanh(r/2) e^{i phi}.
    """
    dw = drift(r, phi)
    size = np.abs(dw) / np.cosh(r / 2) ** 2  # |grad f| in the metric 2|dw|/(1-|w|^2)
    rel = -np.angle(dw) - phi
    return 2 * dt * size * np.cos(rel), 2 * dt * size * np.sin(rel)


@dataclass
class BMPath:
    model: str
    start: HypPoint
    samples: List[Tuple[float, complex]]
    step_control: StepControl
    seed: int

    @property
    def times(self) -> np.ndarray:
        return np.array([s[0] for s in self.samples])

    @property
    def coordinates(self) -> np.ndarray:
        return np.array([s[1] for s in self.samples])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("time,re,im\n")
            for t, z in self.samples:
                fh.write(f"{t:.17g},{z.real:.17g},{z.imag:.17g}\n")


def sample_bm(start: HypPoint, t: float, step: StepControl = StepControl(), seed: int = 0,
              record_every: int = 1) -> BMPath:
    """One Brownian path (generator = Laplacian) in the model of `start`."""
    if t < 0:
        raise ConfigError("t must be nonnegative")
    if t == 0:
        return BMPath(start.model, start, [(0.0, start.coordinate)], step, seed)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    z0 = complex(from_half_plane("disc", to_half_plane(start.model, start.coordinate, start.opening)))
    res = walk(rng, 1, t, step, start=z0, record_every=max(1, record_every))
    zs = from_half_plane(start.model, to_half_plane("disc", res.trace[:, 0]), start.opening)
    samples = [(float(tt), complex(z)) for tt, z in zip(res.times, zs)]
    samples[0] = (0.0, start.coordinate)
    return BMPath(start.model, start, samples, step, seed)


def endpoint_radii(t: float, n: int, seed: int, step: StepControl = StepControl(), workers=None,
                   checkpoints: Sequence[float] = ()):
    """Distances d(0, X_t) for n paths started at the disc origin.

    With checkpoints, returns a dict time -> distances (t always included).
    """
    res = run_blocks(_radii_block, n, seed, workers, t=t, step=step, checkpoints=tuple(checkpoints))
    if not checkpoints:
        return concat(res, n, t)
    return {c: concat(res, n, c) for c in sorted(set(checkpoints) | {t})}


def _radii_block(rng, size, t, step, checkpoints):
    w = walk(rng, size, t, step, track_angle=False, checkpoints=checkpoints)
    out = dict(w.r_at)
    out[t] = w.r
    return out


def endpoints(t: float, n: int, seed: int, step: StepControl = StepControl(), start: complex = 0j,
              workers=None) -> Tuple[np.ndarray, np.ndarray]:
    """(distance, angle) of X_t relative to `start` for n paths."""
    res = run_blocks(_polar_block, n, seed, workers, t=t, step=step, start=start)
    return concat(res, n, 0), concat(res, n, 1)


def _polar_block(rng, size, t, step, start):
    w = walk(rng, size, t, step, start=start)
    return w.r, w.phi


# ---------------------------------------------------------------------------
# heat kernel
# ---------------------------------------------------------------------------

def _logsinh(x):
    x = np.asarray(x, dtype=float)
    small = x < 1e-3
    xs = np.where(small, x, 1.0)
    xl = np.where(small, 1.0, x)
    with np.errstate(divide="ignore"):
        return np.where(small, np.log(np.where(x > 0, x, 1e-300)) + xs ** 2 / 6,
                        xl + np.log1p(-np.exp(-2 * xl)) - math.log(2))


def _log_integrand(v, rho, t):
    """log of the integrand of the McKean integral after s = rho + v^2."""
    v = np.asarray(v, dtype=float)
    y = v ** 2 / 2
    s = rho + v ** 2
    with np.errstate(divide="ignore"):
        # log(2v) - log sinh(v^2/2)/2 written to stay finite at v = 0
        small = y < 1e-3
        ratio = np.where(small, y ** 2 / 6, _logsinh(np.where(small, 1.0, y)) - np.log(np.where(small, 1.0, y)))
        head = 1.5 * math.log(2) - 0.5 * ratio
        return head + np.log(s) - s ** 2 / (4 * t) - 0.5 * math.log(2) - 0.5 * _logsinh(rho + y)


def _log_prefactor(t):
    return 0.5 * math.log(2) - t / 4 - 1.5 * math.log(4 * math.pi * t)


def _vmax(rho, t):
    return math.sqrt(-rho + math.sqrt(rho ** 2 + 4 * t * 80)) + 1e-12


def heat_kernel(t: float, r: float, epsrel: float = 1e-11) -> float:
    """Heat kernel for d/dt = Laplacian on the curvature -1 plane, at distance r.

    McKean's integral, evaluated by adaptive quadrature after the substitution
    s = r + v^2 that removes the endpoint singularity.
    """
    if not t > 0:
        raise ConfigError("t must be positive")
    if r < 0:
        raise ConfigError("distance must be nonnegative")
    return math.exp(log_heat_kernel(t, r, epsrel))


def log_heat_kernel(t: float, r: float, epsrel: float = 1e-11) -> float:
    rho = float(r)
    vm = _vmax(rho, t)
    grid = np.linspace(0, vm, 65)
    ref = float(np.max(_log_integrand(grid, rho, t)))
    val, err = integrate.quad(lambda v: math.exp(float(_log_integrand(v, rho, t)) - ref), 0, vm,
                              epsabs=0, epsrel=epsrel, limit=400)
    if not (val > 0 and np.isfinite(val)) or err > 1e-6 * val:
        raise NumericalError(f"heat kernel quadrature failed at t={t}, r={r}")
    return _log_prefactor(t) + ref + math.log(val)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(400)


def log_heat_kernel_gl(t: float, r) -> np.ndarray:
    """Vectorized log heat kernel by fixed 400-node Gauss-Legendre quadrature."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    vm = np.sqrt(-r + np.sqrt(r ** 2 + 4 * t * 80))
    v = 0.5 * (_GL_NODES[None, :] + 1) * vm[:, None]
    g = _log_integrand(v, r[:, None], t)
    ref = g.max(axis=1)
    val = (np.exp(g - ref[:, None]) * _GL_WEIGHTS[None, :]).sum(axis=1) * 0.5 * vm
    return _log_prefactor(t) + ref + np.log(val)


@dataclass
class HeatKernelOracle:
    """Tabulated log p(t, .) with a cubic spline, for fast Monte Carlo use."""

    t: float
    r_max: float = 0.0
    spacing: float = 0.02
    _spline: object = field(default=None, repr=False)

    def __post_init__(self):
        if not self.t > 0:
            raise ConfigError("t must be positive")
        if self.r_max <= 0:
            self.r_max = self.t + 14 * math.sqrt(self.t) + 10
        grid = np.arange(0, self.r_max + self.spacing, self.spacing)
        self._spline = interpolate.CubicSpline(grid, log_heat_kernel_gl(self.t, grid))

    def log_p(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if np.any(r > self.r_max):
            raise NumericalError("distance beyond the tabulated range")
        return self._spline(r)

    def radial_cdf(self, r) -> np.ndarray:
        grid = np.linspace(0, self.r_max, 20001)
        dens = 2 * np.pi * np.sinh(grid) * np.exp(self.log_p(grid))
        cdf = integrate.cumulative_trapezoid(dens, grid, initial=0)
        return np.interp(r, grid, cdf)


@lru_cache(maxsize=16)
def kernel_oracle(t: float) -> HeatKernelOracle:
    return HeatKernelOracle(float(t))


def kernel_mass(t: float) -> float:
    """Total mass of p(t, .) against 2 pi sinh r dr by adaptive quadrature."""
    hi = t + 14 * math.sqrt(t) + 10
    f = lambda r: 2 * math.pi * math.sinh(r) * heat_kernel(t, r)
    val, _ = integrate.quad(f, 0, hi, limit=200, epsrel=1e-10, points=[t])
    return val


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

@dataclass
class EstimatorReport:
    estimate: float
    stderr: float
    n: int
    t: float
    seed: int
    extra: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        d = {"estimate": self.estimate, "stderr": self.stderr, "n": self.n, "t": self.t, "seed": self.seed}
        d.update(self.extra)
        return d


def plane_entropy(t: float, N: int, seed: int, step: StepControl = StepControl(), workers=None,
                  max_stderr: Optional[float] = None) -> EstimatorReport:
    """Monte Carlo estimate of the entropy rate of the plane.

    H(s) = -E log p(s, d(0, X_s)) is estimated at s = t/4, t/2, t on the same
    paths.  Since H(s) = h s + alpha log s + c + o(1), the second difference
    (H(t) - 2 H(t/2) + H(t/4)) / (t/4) cancels alpha and c and is returned as
    the estimate of h.  The finite-time ratio H(t)/t, which approaches h only
    like log(t)/t, is reported as `finite_time_ratio`.
    """
    if N < 2:
        raise ConfigError("need at least two paths")
    if not t > 0:
        raise ConfigError("t must be positive")
    times = (t / 4, t / 2, t)
    radii = endpoint_radii(t, N, seed, step, workers, checkpoints=times[:2])
    neglog = {s: -kernel_oracle(float(s)).log_p(radii[s]) for s in times}
    per_path = (neglog[t] - 2 * neglog[t / 2] + neglog[t / 4]) / (t / 4)
    est, se = mean_stderr(per_path)
    ratio, ratio_se = mean_stderr(neglog[t] / t)
    rep = EstimatorReport(est, se, int(N), float(t), int(seed),
                          {"finite_time_ratio": ratio, "finite_time_ratio_stderr": ratio_se,
                           "mean_distance_rate": float(np.mean(radii[t]) / t)})
    if max_stderr is not None and se > max_stderr:
        raise ToleranceError(f"stderr {se:.3g} exceeds requested {max_stderr:.3g}")
    return rep


def entropy_of_time(t: float) -> float:
    """H(t) = -int p log p dvol by quadrature of the tabulated kernel."""
    o = kernel_oracle(float(t))
    g = np.linspace(0, o.r_max, 40001)
    lp = o.log_p(g)
    return float(integrate.trapezoid(-lp * 2 * np.pi * np.sinh(g) * np.exp(lp), g))


# test functions phi(z, 1-|z|^2) and their Laplacians; module level so worker processes can pickle them
def _log_density(z, omz): return -np.log(omz)
def _cosh_distance(z, omz): return (2 - omz) / omz
def _cosh_distance_lap(z, omz): return 2 * (2 - omz) / omz
def _one(z, omz): return np.ones_like(omz)
def _zero(z, omz): return np.zeros_like(omz)


TEST_FUNCTIONS: Dict[str, Tuple[Callable, Callable]] = {
    "log_density": (_log_density, _one),
    "cosh_distance": (_cosh_distance, _cosh_distance_lap),
    "constant": (_one, _zero),
}


def dynkin_check(test_fn="log_density", x: complex = 0j, t: float = 1.0, N: int = 20000, seed: int = 0,
                 step: StepControl = StepControl(dt=0.005), workers=None) -> EstimatorReport:
    """Calibration c in E phi(X_t) - phi(x) = c E int_0^t Laplacian(phi)(X_s) ds.

    c is the ratio of the two sample means; stderr by the delta method.  With
    the walk's generator equal to the Laplacian, c should be 1.
    """
    if isinstance(test_fn, str):
        if test_fn not in TEST_FUNCTIONS:
            raise ConfigError(f"unknown test function {test_fn!r}")
        phi, lap = TEST_FUNCTIONS[test_fn]
    else:
        phi, lap = test_fn
    if not t > 0:
        raise NumericalError("t = 0: both sides vanish, calibration undefined")
    x = complex(x)
    res = run_blocks(_dynkin_block, N, seed, workers, t=t, step=step, x=x, phi=phi, lap=lap)
    Y = concat(res, N, 0)
    Z = concat(res, N, 1)
    mz = Z.mean()
    if abs(mz) < 1e-12 * max(1.0, np.abs(Z).max(initial=0)) or abs(mz) < 1e-300:
        raise NumericalError("degenerate denominator: the Laplacian integral vanishes")
    my = Y.mean()
    c = my / mz
    # delta method for a ratio of correlated means
    cov = np.cov(np.vstack([Y, Z]))
    var = (cov[0, 0] - 2 * c * cov[0, 1] + c * c * cov[1, 1]) / (mz * mz * N)
    return EstimatorReport(float(c), float(np.sqrt(max(var, 0.0))), int(N), float(t), int(seed),
                           {"lhs": float(my), "rhs": float(mz)})


def _dynkin_block(rng, size, t, step, x, phi, lap):
    w = walk(rng, size, t, step, start=x, integrands={"lap": lap})
    z, omz = disc_from_polar(w.r, w.phi, x)
    omx = np.array([1 - abs(x) ** 2])
    return phi(z, omz) - phi(np.array([x]), omx), w.integrals["lap"]


def radial_sde_drift(t: float, n: int, seed: int, dt: float = 1e-4) -> float:
    """Independent oracle: Euler scheme for dr = coth(r) dt + sqrt(2) dB; returns E r_t / t."""
    rng = np.random.default_rng(seed)
    nsteps = int(round(t / dt))
    r = np.full(n, 1e-3)
    sq = math.sqrt(2 * dt)
    for _ in range(nsteps):
        r = np.abs(r + dt / np.tanh(r) + sq * rng.standard_normal(n))
        r = np.maximum(r, 1e-6)
    return float(r.mean() / t)
