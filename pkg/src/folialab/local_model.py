"""Linear hyperbolic singularity V = a x d/dx + b y d/dy on the unit bidisc.

The leaf through a base point (x0, y0) of the unit torus is parametrized by
complex time u as (x0 e^{a u}, y0 e^{b u}); it stays inside the bidisc exactly
for u in the sector A = {Re(a u) < 0, Re(b u) < 0}.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy import integrate, optimize

from .errors import ConfigError, NumericalError
from .hyperbolic import density_array, distance_array

DEEP = math.exp(5)


@dataclass(frozen=True)
class LinearSingularity:
    a: complex
    b: complex

    def __post_init__(self):
        object.__setattr__(self, "a", complex(self.a))
        object.__setattr__(self, "b", complex(self.b))
        if not (self.a.real > 0 and self.b.real > 0):
            raise ConfigError("eigenvalues need positive real parts")

    @property
    def hyperbolic(self) -> bool:
        return abs((self.a / self.b).imag) > 1e-12 * abs(self.a / self.b)

    @classmethod
    def from_singularity(cls, data) -> "LinearSingularity":
        a, b = data.eigenvalues
        return cls(a, b)

    def field(self, x, y):
        return self.a * x, self.b * y

    def omega(self, x, y, dx, dy):
        """The defining 1-form a x dy - b y dx evaluated on (dx, dy)."""
        return self.a * x * dy - self.b * y * dx


@dataclass(frozen=True)
class AngularDomain:
    """Open sector lo < arg u < hi (angles taken in (-pi/2, 3pi/2])."""

    lo: float
    hi: float

    @property
    def opening(self) -> float:
        return self.hi - self.lo

    @property
    def bisector(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def rays(self):
        return cmath.exp(1j * self.lo), cmath.exp(1j * self.hi)

    def relative_angle(self, u):
        """arg u measured from lo, in (-pi, pi] shifted to the sector's frame."""
        u = np.asarray(u, dtype=complex)
        return np.angle(u * np.exp(-1j * self.bisector)) + self.opening / 2

    def contains(self, u, closed: bool = False):
        ang = self.relative_angle(u)
        u = np.asarray(u)
        if closed:
            return (ang >= -1e-12) & (ang <= self.opening + 1e-12) | (u == 0)
        return (ang > 0) & (ang < self.opening) & (u != 0)

    def boundary_distance(self, u):
        """Euclidean distance from u to the two boundary rays."""
        u = np.asarray(u, dtype=complex)
        ang = self.relative_angle(u)
        dist = []
        for rel in (ang, self.opening - ang):
            rel = np.abs(rel)
            dist.append(np.where(rel < np.pi / 2, np.abs(u) * np.sin(np.minimum(rel, np.pi / 2)), np.abs(u)))
        return np.minimum(dist[0], dist[1])

    def to_standard(self, u):
        """Rotate into the sector {|arg z| < opening/2}."""
        return np.asarray(u, dtype=complex) * np.exp(-1j * self.bisector)


def angular_domain(s: LinearSingularity) -> AngularDomain:
    """Intersection of the half-planes Re(a u) < 0 and Re(b u) < 0."""
    aa, ab = cmath.phase(s.a), cmath.phase(s.b)
    lo = max(np.pi / 2 - aa, np.pi / 2 - ab)
    hi = min(3 * np.pi / 2 - aa, 3 * np.pi / 2 - ab)
    if hi <= lo:
        raise NumericalError("empty angular domain")
    return AngularDomain(lo, hi)


@dataclass(frozen=True)
class LeafCoord:
    x0: complex
    y0: complex
    u: complex

    def __post_init__(self):
        if abs(abs(self.x0) - 1) > 1e-12 or abs(abs(self.y0) - 1) > 1e-12:
            raise ConfigError("base point must lie on the unit torus")


def leaf_point(s: LinearSingularity, c: LeafCoord, check: bool = True):
    if check and not angular_domain(s).contains(c.u, closed=True):
        raise ConfigError(f"u = {c.u} is outside the angular domain")
    return c.x0 * cmath.exp(s.a * c.u), c.y0 * cmath.exp(s.b * c.u)


def leaf_points(s: LinearSingularity, u, x0=1.0, y0=1.0):
    u = np.asarray(u, dtype=complex)
    return x0 * np.exp(s.a * u), y0 * np.exp(s.b * u)


def rho(point) -> float:
    x, y = point
    n = abs(x) ** 2 + abs(y) ** 2
    if n == 0:
        raise ConfigError("rho is undefined at the origin")
    return -math.log(n)


def rho_of_u(s: LinearSingularity, u):
    """rho along the leaf, computed from exponents so deep points do not underflow."""
    u = np.asarray(u, dtype=complex)
    ea, eb = 2 * (s.a * u).real, 2 * (s.b * u).real
    return -np.logaddexp(ea, eb)


@dataclass
class ExitProjection:
    v0: float
    path: Callable
    point: tuple
    u: complex
    u_exit: complex


def exit_v0(s: LinearSingularity, u):
    """Real time at which moving u in the real direction reaches the bidisc boundary.

    |x| = exp(Re(a) v - Im(a) Im u) hits 1 at v = Im(a) Im u / Re(a); the exit
    is the first of the two coordinates to do so.
    """
    u = np.asarray(u, dtype=complex)
    va = s.a.imag * u.imag / s.a.real
    vb = s.b.imag * u.imag / s.b.real
    return np.minimum(va, vb)


def exit_projection(s: LinearSingularity, c: LeafCoord) -> ExitProjection:
    if not angular_domain(s).contains(c.u, closed=True):
        raise ConfigError(f"u = {c.u} is outside the angular domain")
    v0 = float(exit_v0(s, c.u))
    v0 = max(v0, c.u.real)  # already on the boundary
    ue = complex(v0, c.u.imag)

    def path(zeta):
        zeta = np.asarray(zeta, dtype=float)
        uu = (1 - zeta) * c.u + zeta * ue
        return leaf_points(s, uu, c.x0, c.y0)

    return ExitProjection(v0, path, leaf_point(s, LeafCoord(c.x0, c.y0, ue), check=False), c.u, ue)


def holonomy_log_derivative(s: LinearSingularity, u0: complex, u1: complex,
                            path: Optional[Sequence[complex]] = None) -> float:
    """log |Dh|_m along a leafwise path from u0 to u1, for m = |a x dy - b y dx|.

    On the leaf dx/x = a du, and the transverse metric changes by the factor
    |e^{(a+b) du}|, so the result is Re((a + b)(u1 - u0)) whatever the path.
    The path (default: the segment) must stay in the closed angular domain.
    """
    dom = angular_domain(s)
    pts = [complex(u0), complex(u1)] if path is None else [complex(p) for p in path]
    if path is not None and (abs(pts[0] - u0) > 1e-12 or abs(pts[-1] - u1) > 1e-12):
        raise ConfigError("path endpoints do not match u0, u1")
    if not np.all(dom.contains(np.array(pts), closed=True)):
        raise ConfigError("path leaves the angular domain")
    total = 0.0
    for p, q in zip(pts[:-1], pts[1:]):
        total += ((s.a + s.b) * (q - p)).real
    return total


def separatrix_loop(s: LinearSingularity) -> complex:
    """Time increment of one turn around the separatrix {y = 0}: x returns, y gets e^{2 pi i b/a}."""
    return 2j * np.pi / s.a


def two_leaf_holonomy(s: LinearSingularity, u0: complex, du: complex, eps: float = 1e-6,
                      x0: complex = 1.0, y0: complex = 1.0, rtol: float = 1e-12) -> Dict:
    """Finite-difference holonomy from the integrated flow of two nearby leaves.

    Both leaves are flowed along the complex-time segment u0 -> u0 + du with a
    real-parameter ODE solver.  The transverse displacement is measured with
    the 1-form omega, which kills the leaf direction, so no transversal needs
    to be chosen.  Returns the log modulus of the derivative and the complex
    multiplier measured in the y coordinate on {x = const}.
    """
    p = np.array(leaf_points(s, u0, x0, y0), dtype=complex)
    q = p + np.array([0.0, eps * abs(p[1]) if p[1] != 0 else eps], dtype=complex)

    # each coordinate is integrated in units of its starting modulus
    scale = np.where(np.abs(p) > 0, np.abs(p), 1.0)

    def rhs(_, z):
        x = (z[0] + 1j * z[1]) * scale[0]
        y = (z[2] + 1j * z[3]) * scale[1]
        fx, fy = s.field(x, y)
        fx, fy = fx * du / scale[0], fy * du / scale[1]
        return [fx.real, fx.imag, fy.real, fy.imag]

    out = []
    for z in (p, q):
        zs = z / scale
        sol = integrate.solve_ivp(rhs, (0, 1), [zs[0].real, zs[0].imag, zs[1].real, zs[1].imag],
                                  method="DOP853", rtol=rtol, atol=rtol * 1e-3)
        if not sol.success:
            raise NumericalError(sol.message)
        e = sol.y[:, -1]
        out.append(np.array([e[0] + 1j * e[1], e[2] + 1j * e[3]]) * scale)
    d0, d1 = q - p, out[1] - out[0]
    w0 = s.omega(p[0], p[1], d0[0], d0[1])
    w1 = s.omega(out[0][0], out[0][1], d1[0], d1[1])
    return {"log_derivative": math.log(abs(w1 / w0)), "multiplier": complex(w1 / w0),
            "endpoint": out[0]}


# ---------------------------------------------------------------------------
# metric comparisons in the sector
# ---------------------------------------------------------------------------

def sector_density(dom: AngularDomain, u):
    """Poincare density of A at u, per unit |du|."""
    return density_array("sector", dom.to_standard(u), dom.opening)


def distance_to_collar(dom: AngularDomain, u) -> float:
    """Poincare distance in A from u to the collar {d_e(., boundary) <= 1}.

    The collar's inner edge is the sector translated along the bisector to
    the vertex 1/sin(opening/2) (a pair of rays); the distance is minimized
    along each ray.
    """
    z = complex(dom.to_standard(u))
    theta = dom.opening
    if dom.boundary_distance(u) <= 1:
        return 0.0
    vert = 1 / math.sin(theta / 2) if theta < np.pi else None
    best = np.inf
    for sgn in (1, -1):
        if vert is None:
            # opening pi: the standard sector is Re z > 0 and the edge is Re z = 1
            pts_fn = lambda t, s_=sgn: complex(1.0, s_ * t)
        else:
            pts_fn = lambda t, d=cmath.exp(1j * sgn * theta / 2): vert + d * t
        f = lambda lt: float(distance_array("sector", z, pts_fn(math.expm1(lt)), theta))
        grid = np.linspace(0, math.log1p(10 * abs(z) + 10), 400)
        vals = np.array([f(g) for g in grid])
        k = int(np.argmin(vals))
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
        res = optimize.minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        best = min(best, float(res.fun), float(vals[k]))
    return best


def sample_deep(dom: AngularDomain, n: int, seed: int, threshold: float = DEEP, max_log_radius: float = 9.0):
    """Random u in A with boundary distance >= threshold (log-uniform radius, uniform angle)."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        m = 4 * n
        r = np.exp(rng.uniform(math.log(threshold), math.log(threshold) + max_log_radius, m))
        ang = dom.lo + dom.opening * rng.uniform(0.02, 0.98, m)
        u = r * np.exp(1j * ang)
        out.extend(u[dom.boundary_distance(u) >= threshold].tolist())
    return np.array(out[:n])


def sector_metric_checks(s: LinearSingularity, n_samples: int = 200, seed: int = 0,
                         threshold: float = DEEP, min_samples: int = 10) -> Dict:
    """Fitted comparison constants between the sector's Poincare geometry,
    rho, and Euclidean boundary distance, over random deep points of A.

    (i) d_P(u, collar) / log d_e(u, boundary); (ii) rho(leaf point) / d_e;
    (iii) sector density * rho (leaf speed |du| has unit length in the
    flat leaf metric).
    """
    if n_samples < min_samples:
        raise ConfigError(f"need at least {min_samples} deep samples")
    dom = angular_domain(s)
    u = sample_deep(dom, n_samples, seed, threshold)
    de = dom.boundary_distance(u)
    r1 = np.array([distance_to_collar(dom, uu) for uu in u]) / np.log(de)
    r2 = rho_of_u(s, u) / de
    r3 = sector_density(dom, u) * rho_of_u(s, u)
    # ratio (i) along the bisector, moving outwards
    far = np.exp(np.linspace(math.log(threshold), math.log(threshold) + 8, 9)) / math.sin(min(dom.opening, np.pi) / 2)
    ub = far * cmath.exp(1j * dom.bisector)
    rb = np.array([distance_to_collar(dom, uu) for uu in ub]) / np.log(dom.boundary_distance(ub))

    def span(x):
        return {"min": float(x.min()), "max": float(x.max()), "median": float(np.median(x)),
                "C": float(max(x.max(), 1 / x.min()))}

    return {
        "a": [s.a.real, s.a.imag], "b": [s.b.real, s.b.imag],
        "opening": dom.opening, "n": int(n_samples), "threshold": threshold,
        "ratio_poincare_log": span(r1),
        "ratio_poincare_log_within_10pct": float(np.mean(np.abs(r1 - 1) <= 0.1)),
        "ratio_poincare_log_bisector": rb.tolist(),
        "ratio_rho_euclid": span(r2),
        "ratio_density_rho": span(r3),
    }
