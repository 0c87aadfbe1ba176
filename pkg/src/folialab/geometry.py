"""Polynomial foliations of the projective plane.

A foliation of degree d is given by a homogeneous vector field (P, Q, R) on C^3
with components of degree d.  In the affine chart where coordinate k equals 1,
with affine coordinates the two remaining homogeneous coordinates (in increasing
index order), the induced vector field is

    (F_i - w_i F_k, F_j - w_j F_k)   evaluated at the lift w (w_k = 1).

Chart 0 is X = 1 with coordinates (Y/X, Z/X), chart 1 is Y = 1 with
(X/Y, Z/Y) and chart 2 is Z = 1 with (X/Z, Y/Z).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericalError

COMPONENTS = ("P", "Q", "R")
CHART_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}
_TIE = 1e-9


def _check_chart(chart: int) -> int:
    if chart not in CHART_AXES:
        raise ConfigError(f"chart index must be 0, 1 or 2, got {chart!r}")
    return int(chart)


# ---------------------------------------------------------------------------
# points of the projective plane
# ---------------------------------------------------------------------------

def _normalize_homogeneous(w) -> np.ndarray:
    w = np.asarray(w, dtype=complex).reshape(3)
    mod = np.abs(w)
    m = mod.max()
    if not np.isfinite(m) or m == 0.0:
        raise ConfigError("homogeneous coordinates must not all vanish")
    # among near-ties prefer the largest index, so chart Z=1 wins for ties
    k = int(np.nonzero(mod >= m * (1 - _TIE))[0][-1])
    out = w / w[k]
    out[k] = 1.0
    return out


@dataclass(frozen=True)
class ProjPoint:
    """Point of P^2 stored with its max-modulus coordinate equal to 1."""

    homogeneous: Tuple[complex, complex, complex]

    def __init__(self, homogeneous):
        object.__setattr__(self, "homogeneous", tuple(complex(c) for c in _normalize_homogeneous(homogeneous)))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.homogeneous, dtype=complex)

    @property
    def chart(self) -> int:
        """Index of the normalizing (max-modulus) coordinate."""
        return int(max_chart(self.array))

    @classmethod
    def from_chart(cls, chart: int, coords) -> "ProjPoint":
        return cls(lift(chart, coords))

    def in_chart(self, chart: int) -> np.ndarray:
        chart = _check_chart(chart)
        w = self.array
        if abs(w[chart]) < 1e-300:
            raise ConfigError(f"point {self} is not in chart {chart}")
        i, j = CHART_AXES[chart]
        return np.array([w[i] / w[chart], w[j] / w[chart]])

    def distance(self, other: "ProjPoint") -> float:
        """Fubini-Study angle between the two points."""
        a, b = self.array, other.array
        a = a / np.linalg.norm(a)
        b = b / np.linalg.norm(b)
        ip = np.vdot(b, a)
        if abs(ip) > 0:
            b = b * (ip / abs(ip))
        # chord form stays accurate for tiny angles, where arccos loses half the digits
        return float(2 * np.arcsin(min(1.0, np.linalg.norm(a - b) / 2)))

    def close_to(self, other: "ProjPoint", tol: float = 1e-8) -> bool:
        return self.distance(other) <= tol


def lift(chart: int, coords) -> np.ndarray:
    """Homogeneous lift(s) with coordinate `chart` equal to 1; coords shape (..., 2)."""
    chart = _check_chart(chart)
    coords = np.asarray(coords, dtype=complex)
    out = np.ones(coords.shape[:-1] + (3,), dtype=complex)
    i, j = CHART_AXES[chart]
    out[..., i] = coords[..., 0]
    out[..., j] = coords[..., 1]
    return out


def to_chart(w, chart: int) -> np.ndarray:
    """Affine coordinates of homogeneous points w (..., 3) in `chart`."""
    chart = _check_chart(chart)
    w = np.asarray(w, dtype=complex)
    i, j = CHART_AXES[chart]
    return np.stack([w[..., i] / w[..., chart], w[..., j] / w[..., chart]], axis=-1)


def change_chart(coords, src: int, dst: int) -> np.ndarray:
    return to_chart(lift(src, coords), dst)


def max_chart(w) -> np.ndarray:
    """Chart index of the max-modulus coordinate (largest index on ties)."""
    mod = np.abs(np.asarray(w))
    m = mod.max(axis=-1, keepdims=True)
    near = mod >= m * (1 - _TIE)
    return 2 - np.argmax(near[..., ::-1], axis=-1)


def chart_jacobian(coords, src: int, dst: int) -> np.ndarray:
    """Jacobian of the transition map src -> dst at coords (..., 2); shape (..., 2, 2)."""
    src, dst = _check_chart(src), _check_chart(dst)
    coords = np.asarray(coords, dtype=complex)
    w = lift(src, coords)
    i, j = CHART_AXES[src]
    # dw/d(coords): columns are e_i and e_j in homogeneous space
    dw = np.zeros(coords.shape[:-1] + (3, 2), dtype=complex)
    dw[..., i, 0] = 1.0
    dw[..., j, 1] = 1.0
    a, b = CHART_AXES[dst]
    wd = w[..., dst]
    jac = np.empty(coords.shape[:-1] + (2, 2), dtype=complex)
    for row, m in enumerate((a, b)):
        # d(w_m / w_dst) = dw_m / w_dst - w_m dw_dst / w_dst^2
        jac[..., row, :] = dw[..., m, :] / wd[..., None] - (w[..., m] / wd ** 2)[..., None] * dw[..., dst, :]
    return jac


# ---------------------------------------------------------------------------
# foliation specs
# ---------------------------------------------------------------------------

@dataclass
class FoliationSpec:
    """Homogeneous polynomial field (P, Q, R) of degree `degree`.

    `coefficients[m]` maps exponent triples (i, j, k) with i+j+k = degree to the
    complex coefficient of X^i Y^j Z^k in component m.
    """

    degree: int
    coefficients: Tuple[Dict[Tuple[int, int, int], complex], ...]
    name: str = "custom"
    _exps: np.ndarray = field(init=False, repr=False)
    _coef: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = int(self.degree)
        if d < 1:
            raise ConfigError(f"degree must be >= 1, got {self.degree}")
        if len(self.coefficients) != 3:
            raise ConfigError("need three components P, Q, R")
        exps = sorted({e for comp in self.coefficients for e in comp})
        for e in exps:
            if len(e) != 3 or min(e) < 0 or sum(e) != d:
                raise ConfigError(f"monomial exponent {e} is not of degree {d}")
        if not exps:
            raise ConfigError("the zero field does not define a foliation")
        self.degree = d
        self.coefficients = tuple({tuple(map(int, e)): complex(c) for e, c in comp.items()} for comp in self.coefficients)
        self._exps = np.array(exps, dtype=int).reshape(-1, 3)
        self._coef = np.array([[comp.get(e, 0.0) for e in exps] for comp in self.coefficients], dtype=complex)

    # homogeneous evaluation -------------------------------------------------
    def _monomials(self, w: np.ndarray, exps: np.ndarray) -> np.ndarray:
        out = np.ones(w.shape[:-1] + (exps.shape[0],), dtype=complex)
        for axis in range(3):
            e = exps[:, axis]
            if np.any(e):
                out = out * w[..., axis, None] ** e
        return out

    def homogeneous(self, w) -> np.ndarray:
        """(P, Q, R) at homogeneous points w (..., 3)."""
        w = np.asarray(w, dtype=complex)
        return self._monomials(w, self._exps) @ self._coef.T

    def homogeneous_jacobian(self, w) -> np.ndarray:
        """dF_m/dw_n with shape (..., 3, 3)."""
        w = np.asarray(w, dtype=complex)
        out = np.zeros(w.shape[:-1] + (3, 3), dtype=complex)
        for n in range(3):
            e = self._exps[:, n]
            mask = e > 0
            if not np.any(mask):
                continue
            sub = self._exps[mask].copy()
            sub[:, n] -= 1
            mon = self._monomials(w, sub)
            out[..., :, n] = mon @ (self._coef[:, mask] * e[mask]).T
        return out

    # affine charts ------------------------------------------------------------
    def field(self, chart: int, coords) -> np.ndarray:
        """Affine vector field in `chart` at coords (..., 2)."""
        chart = _check_chart(chart)
        w = lift(chart, coords)
        F = self.homogeneous(w)
        i, j = CHART_AXES[chart]
        Fk = F[..., chart]
        return np.stack([F[..., i] - w[..., i] * Fk, F[..., j] - w[..., j] * Fk], axis=-1)

    def jacobian(self, chart: int, coords) -> np.ndarray:
        """Jacobian of the affine field in `chart`, shape (..., 2, 2)."""
        chart = _check_chart(chart)
        w = lift(chart, coords)
        F = self.homogeneous(w)
        G = self.homogeneous_jacobian(w)
        i, j = CHART_AXES[chart]
        k = chart
        J = np.empty(w.shape[:-1] + (2, 2), dtype=complex)
        J[..., 0, 0] = G[..., i, i] - F[..., k] - w[..., i] * G[..., k, i]
        J[..., 0, 1] = G[..., i, j] - w[..., i] * G[..., k, j]
        J[..., 1, 0] = G[..., j, i] - w[..., j] * G[..., k, i]
        J[..., 1, 1] = G[..., j, j] - F[..., k] - w[..., j] * G[..., k, j]
        return J

    def chart_factor(self, coords, src: int, dst: int) -> np.ndarray:
        """Scalar c with field(dst, phi(z)) = c * Dphi(z) field(src, z).

        For the homogeneous construction c = (w_dst)^(1-d) where w is the lift
        normalized in chart src.
        """
        w = lift(src, coords)
        return w[..., dst] ** (1 - self.degree)

    # serialization ------------------------------------------------------------
    def to_text(self) -> str:
        lines = [f"# foliation {self.name}", f"degree = {self.degree}"]
        for name, comp in zip(COMPONENTS, self.coefficients):
            for e in sorted(comp):
                c = comp[e]
                lines.append(f"{name}[{e[0]},{e[1]},{e[2]}] = {_fmt_complex(c)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, name: str = "custom") -> "FoliationSpec":
        degree = None
        comps: List[Dict] = [{}, {}, {}]
        pat = re.compile(r"^([PQR])\[\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]\s*=\s*(.+)$")
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("degree"):
                try:
                    degree = int(line.split("=", 1)[1])
                except (IndexError, ValueError):
                    raise ConfigError(f"line {lineno}: bad degree line {raw!r}") from None
                continue
            m = pat.match(line)
            if not m:
                raise ConfigError(f"line {lineno}: cannot parse {raw!r}")
            comp = COMPONENTS.index(m.group(1))
            e = (int(m.group(2)), int(m.group(3)), int(m.group(4)))
            comps[comp][e] = comps[comp].get(e, 0) + _parse_complex(m.group(5), lineno)
        if degree is None:
            raise ConfigError("missing 'degree = ...' line")
        return cls(degree, tuple(comps), name=name)

    def check_chart_consistency(self, n: int = 64, seed: int = 0, tol: float = 1e-9) -> float:
        """Max relative violation of the chart transition law on random overlap samples."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for src, dst in product(range(3), range(3)):
            if src == dst:
                continue
            z = rng.normal(size=(n, 2)) + 1j * rng.normal(size=(n, 2))
            z *= 0.8
            w = lift(src, z)
            ok = np.abs(w[:, dst]) > 0.2
            z = z[ok]
            lhs = self.field(dst, change_chart(z, src, dst))
            rhs = self.chart_factor(z, src, dst)[:, None] * np.einsum("nij,nj->ni", chart_jacobian(z, src, dst), self.field(src, z))
            scale = np.maximum(np.abs(lhs).max(axis=1), 1.0)
            worst = max(worst, float((np.abs(lhs - rhs).max(axis=1) / scale).max()))
        if worst > tol:
            raise NumericalError(f"affine fields disagree across charts (max rel. error {worst:.3g})")
        return worst


def _fmt_complex(c: complex) -> str:
    return f"{c.real:.17g}{'+' if c.imag >= 0 else '-'}{abs(c.imag):.17g}i"


def _parse_complex(s: str, lineno: int = 0) -> complex:
    t = s.strip().replace(" ", "").replace("i", "j")
    try:
        return complex(t)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad complex number {s!r}") from None


def jouanolou(d: int = 2) -> FoliationSpec:
    """Field Y^d dX + Z^d dY + X^d dZ, i.e. P = Y^d, Q = Z^d, R = X^d."""
    d = int(d)
    if d < 2:
        raise ConfigError(f"Jouanolou foliation needs degree >= 2, got {d}")
    return FoliationSpec(d, ({(0, d, 0): 1}, {(0, 0, d): 1}, {(d, 0, 0): 1}), name=f"jouanolou:{d}")


def linear_spec(a: complex, b: complex) -> FoliationSpec:
    """Degree-1 field whose chart Z=1 expression is a x d/dx + b y d/dy."""
    return FoliationSpec(1, ({(1, 0, 0): a}, {(0, 1, 0): b}, {}), name=f"linear:{a},{b}")


def random_spec(d: int, seed: int = 0) -> FoliationSpec:
    """Generic spec with independent complex Gaussian coefficients."""
    rng = np.random.default_rng(seed)
    exps = [e for e in product(range(d + 1), repeat=3) if sum(e) == d]
    comps = tuple({e: complex(rng.normal(), rng.normal()) for e in exps} for _ in range(3))
    return FoliationSpec(d, comps, name=f"random:{d}:{seed}")


def eval_field(spec: FoliationSpec, chart: int, point) -> Tuple[complex, complex]:
    """Affine vector field value at a single point of a chart."""
    v = spec.field(chart, np.asarray(point, dtype=complex).reshape(2))
    return complex(v[0]), complex(v[1])


# ---------------------------------------------------------------------------
# singularities
# ---------------------------------------------------------------------------

def _deflated_newton(spec, chart, z0, roots, tol, maxit=80, sigma=1.0):
    z = np.array(z0, dtype=complex)
    for _ in range(maxit):
        F = spec.field(chart, z)
        J = spec.jacobian(chart, z)
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return None
        if roots:
            # Newton step for M(z) F(z) with M = prod(1/|z-r|^2 + sigma)
            dlog = 0.0
            for r in roots:
                diff = z - r
                n2 = float(np.real(np.vdot(diff, diff)))
                if n2 < 1e-28:
                    return None
                dlog += (-2.0 * np.real(np.vdot(diff, step)) / n2 ** 2) / (1.0 / n2 + sigma)
            denom = 1.0 - dlog
            if abs(denom) < 1e-14:
                return None
            step = step / denom
        z = z + step
        if not np.all(np.isfinite(z)) or np.abs(z).max() > 1e6:
            return None
        if np.linalg.norm(step) < tol * max(1.0, np.linalg.norm(z)) and np.linalg.norm(spec.field(chart, z)) < 1e-8:
            break
    else:
        return None
    # polish without deflation
    for _ in range(20):
        F = spec.field(chart, z)
        J = spec.jacobian(chart, z)
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        z = z + step
        if np.linalg.norm(step) < tol * max(1.0, np.linalg.norm(z)):
            break
    if np.linalg.norm(spec.field(chart, z)) > 1e-9:
        return None
    return z


def _check_isolated(spec, chart, z):
    J = spec.jacobian(chart, z)
    s = np.linalg.svd(J, compute_uv=False)
    if s[-1] > 1e-8 * max(1.0, s[0]):
        return
    _, _, vh = np.linalg.svd(J)
    v = vh[-1].conj()
    for h in (1e-3, 1e-2):
        if np.linalg.norm(spec.field(chart, z + h * v)) > 1e-10:
            return
    raise NumericalError(f"non-isolated singular set through chart-{chart} point {z}")


def find_singularities(spec: FoliationSpec, tol: float = 1e-12, n_starts: int = 300, seed: int = 0,
                       chart: Optional[int] = None) -> List[ProjPoint]:
    """All singular points, found by deflated multi-start Newton in each chart.

    A root found in chart k is kept only when coordinate k is its max-modulus
    coordinate, so every point is owned by exactly one chart.  With `chart`
    given, only singularities with nonzero coordinate `chart` (the affine ones
    of that chart) are returned.
    """
    if tol <= 0:
        raise ConfigError("tol must be positive")
    rng = np.random.default_rng(seed)
    expected = spec.degree ** 2 + spec.degree + 1
    found: List[ProjPoint] = []
    converged_any = False
    for attempt in range(2):
        starts = n_starts * (4 ** attempt)
        for k in range(3):
            roots: List[np.ndarray] = []
            for _ in range(starts):
                if len(found) >= expected:
                    break
                rad = 1.15 * np.sqrt(rng.uniform(size=2))
                z0 = rad * np.exp(2j * np.pi * rng.uniform(size=2))
                z = _deflated_newton(spec, k, z0, roots, tol)
                if z is None:
                    continue
                converged_any = True
                if any(np.linalg.norm(z - r) < 1e-7 for r in roots):
                    continue
                roots.append(z)
                if np.abs(z).max() > 1 + 1e-9:
                    continue
                _check_isolated(spec, k, z)
                p = ProjPoint.from_chart(k, z)
                if not any(p.close_to(q, 1e-7) for q in found):
                    found.append(p)
            if len(found) >= expected:
                break
        if len(found) >= expected:
            break
    if not converged_any:
        raise NumericalError("root finder did not converge from any start")
    found.sort(key=lambda p: (p.chart, *np.round(np.angle(p.array), 9), *np.round(np.abs(p.array), 9)))
    if chart is not None:
        chart = _check_chart(chart)
        found = [p for p in found if abs(p.array[chart]) > 1e-12]
    return found


@dataclass(frozen=True)
class SingularityData:
    location: ProjPoint
    eigenvalues: Tuple[complex, complex]
    hyperbolic: bool
    linearization_radius: float
    normalization_factor: complex
    chart: int = 2
    raw_eigenvalues: Tuple[complex, complex] = (0j, 0j)
    eigenvectors: Tuple[Tuple[complex, complex], Tuple[complex, complex]] = ((1, 0), (0, 1))

    @property
    def ratio(self) -> complex:
        return self.eigenvalues[1] / self.eigenvalues[0]

    def coords(self) -> np.ndarray:
        return self.location.in_chart(self.chart)

    def eigvec_matrix(self) -> np.ndarray:
        """Columns are the eigenvectors (chart coordinates) for raw eigenvalues."""
        return np.array(self.eigenvectors, dtype=complex).T


def normalize_pair(a: complex, b: complex) -> Tuple[complex, complex, complex]:
    """Phase c maximizing min(Re(c a), Re(c b)); returns (c a, c b, c).

    Ties are broken by the smaller |Im(c a)|.
    """
    a, b = complex(a), complex(b)
    if a == 0 or b == 0:
        raise NumericalError("zero eigenvalue")
    al, be = np.angle(a), np.angle(b)
    A = abs(a) * np.cos(al) - abs(b) * np.cos(be)
    B = abs(a) * np.sin(al) - abs(b) * np.sin(be)
    cands = [-al, -be, np.pi - al, np.pi - be]
    if abs(A) + abs(B) > 0:
        phi = np.arctan2(A, B)
        cands += [phi, phi + np.pi]
    best = None
    for phi in cands:
        c = np.exp(1j * phi)
        score = min((c * a).real, (c * b).real)
        key = (round(score, 12), -round(abs((c * a).imag), 12))
        if best is None or key > best[0]:
            best = (key, c, score)
    c = best[1]
    if best[2] <= 0:
        raise NumericalError(f"eigenvalues {a}, {b} cannot be rotated into the right half-plane (Siegel domain)")
    return c * a, c * b, c


def eigen_data(spec: FoliationSpec, p: ProjPoint, tol: float = 1e-9, require_hyperbolic: bool = False,
               radius_samples: int = 256, seed: int = 0) -> SingularityData:
    """Linear part at a singular point, normalized eigenvalues and box radius."""
    chart = p.chart
    z = p.in_chart(chart)
    if np.linalg.norm(spec.field(chart, z)) > 1e-7:
        raise ConfigError(f"{p} is not a singular point")
    J = spec.jacobian(chart, z)
    lam, vec = np.linalg.eig(J)
    scale = max(1.0, np.abs(J).max())
    if np.abs(lam).max() < 1e-12 * scale:
        raise NumericalError("zero linear part")
    if np.abs(lam).min() < 1e-12 * scale:
        raise NumericalError("degenerate linear part (zero eigenvalue)")
    if abs(lam[0] - lam[1]) < 1e-8 * scale and np.linalg.matrix_rank(vec, tol=1e-6) < 2:
        raise NumericalError("defective linear part")
    a, b, c = normalize_pair(lam[0], lam[1])
    order = [0, 1]
    if (b.imag, b.real) < (a.imag, a.real):
        order = [1, 0]
        a, b = b, a
    lam = lam[order]
    vec = vec[:, order]
    vec = vec / np.linalg.norm(vec, axis=0)
    hyperbolic = abs((a / b).imag) > tol
    if require_hyperbolic and not hyperbolic:
        raise NumericalError(f"eigenvalue ratio {a / b} is real within tolerance {tol}")
    radius = linearization_radius(spec, chart, z, lam, vec, n=radius_samples, seed=seed)
    return SingularityData(p, (complex(a), complex(b)), bool(hyperbolic), radius, complex(c), chart,
                           (complex(lam[0]), complex(lam[1])),
                           tuple(tuple(complex(x) for x in vec[:, m]) for m in range(2)))


def linearization_radius(spec, chart, z, lam, vec, rmax: float = 0.5, frac: float = 0.1,
                         n: int = 256, seed: int = 0) -> float:
    """Largest r <= rmax with |nonlinear remainder| < frac |linear part| on the bidisc.

    Coordinates are the eigen-coordinates xi with z = p + E xi.  The criterion
    is scale-free along rays, so the samples are drawn on the closed bidisc of
    radius r (torus included).
    """
    rng = np.random.default_rng(seed)
    E = np.asarray(vec)
    Einv = np.linalg.inv(E)
    u = rng.uniform(size=(n, 2))
    u[: n // 2] = 1.0  # half the samples on the distinguished boundary
    phases = np.exp(2j * np.pi * rng.uniform(size=(n, 2)))
    unit = np.sqrt(u) * phases

    def ok(r):
        xi = r * unit
        pts = z + xi @ E.T
        V = spec.field(chart, pts) @ Einv.T
        lin = xi * lam
        rem = V - lin
        return bool(np.all(np.linalg.norm(rem, axis=1) < frac * np.linalg.norm(lin, axis=1)))

    if ok(rmax):
        return float(rmax)
    lo, hi = 0.0, rmax
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise NumericalError("linearization radius collapsed to zero")
    return float(lo)


def singularities(spec: FoliationSpec, tol: float = 1e-12, seed: int = 0) -> List[SingularityData]:
    return [eigen_data(spec, p, seed=seed) for p in find_singularities(spec, tol=tol, seed=seed)]
