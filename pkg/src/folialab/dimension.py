"""Degree constants, transversal measures and local-dimension regression."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericalError


# ---------------------------------------------------------------------------
# exact constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DegreeConstants:
    d: int
    lyapunov: Fraction
    brunella_bound: Fraction

    def as_dict(self) -> Dict:
        return {"d": self.d, "lyapunov": str(self.lyapunov), "brunella_bound": str(self.brunella_bound)}


def closed_form(d: int) -> DegreeConstants:
    """Lyapunov exponent -(d+2)/(d-1) = -deg N / deg K and the dimension bound (d-1)/(d+2)."""
    if isinstance(d, bool) or int(d) != d:
        raise ConfigError("degree must be an integer")
    d = int(d)
    if d < 2:
        raise ConfigError("degree must be at least 2")
    lyap = -Fraction(d + 2, d - 1)
    bound = Fraction(d - 1, d + 2)
    assert lyap < 0 < bound < 1 and lyap * bound == -1
    return DegreeConstants(d, lyap, bound)


class DerivedRational(Fraction):
    """A Fraction carrying the chain of facts it was derived from."""

    derivation: Dict

    def __new__(cls, value, derivation):
        self = super().__new__(cls, value)
        self.derivation = derivation
        return self


def jouanolou_dimension() -> DerivedRational:
    """Transverse dimension h_D / |lambda| for the degree-2 Jouanolou foliation."""
    c = closed_form(2)
    h_L = Fraction(1)
    h_D = h_L
    lam = abs(c.lyapunov)
    record = {
        "h_L": {"value": str(h_L), "reason": "leaves are simply connected, so the leaf entropy equals the entropy of the plane"},
        "h_D": {"value": str(h_D), "reason": "h_D = h_L for a discrete holonomy pseudogroup"},
        "|lambda|": {"value": str(lam), "reason": "lambda = -(d+2)/(d-1) at d = 2"},
        "dimension": "h_D / |lambda|",
    }
    return DerivedRational(h_D / lam, record)


# ---------------------------------------------------------------------------
# self-similar measures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IFS:
    """Maps z -> ratio_k * z + offset_k on the disc, chosen with probability weight_k."""

    ratios: tuple
    offsets: tuple
    weights: Optional[tuple] = None

    def __post_init__(self):
        n = len(self.ratios)
        if n == 0 or len(self.offsets) != n:
            raise ConfigError("ratios and offsets must be non-empty and of equal length")
        w = self.weights if self.weights is not None else (1.0 / n,) * n
        if len(w) != n or min(w) <= 0 or abs(sum(w) - 1) > 1e-12:
            raise ConfigError("weights must be positive and sum to 1")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        for r in self.ratios:
            if not 0 < abs(r) < 1:
                raise ConfigError("maps must be strict contractions")
        for r, c in zip(self.ratios, self.offsets):
            if abs(c) + abs(r) > 1 + 1e-12:
                raise ConfigError("a map does not send the disc into itself")
        # the attractor lies in D(0, R); the images of that disc must be disjoint
        R = self.hull_radius
        for i in range(n):
            for j in range(i + 1, n):
                if abs(self.offsets[i] - self.offsets[j]) <= (abs(self.ratios[i]) + abs(self.ratios[j])) * R:
                    raise ConfigError(f"images of maps {i} and {j} overlap")

    @property
    def hull_radius(self) -> float:
        """Radius of a disc about 0 that every map sends into itself."""
        return min(1.0, max(abs(c) / (1 - abs(r)) for r, c in zip(self.ratios, self.offsets)))

    @property
    def log_rate(self) -> float:
        """lambda* = sum p_k log |r_k|."""
        return float(sum(p * math.log(abs(r)) for p, r in zip(self.weights, self.ratios)))

    @property
    def entropy(self) -> float:
        """h* = -sum p_k log p_k."""
        return float(-sum(p * math.log(p) for p in self.weights))

    @property
    def dimension(self) -> float:
        return self.entropy / abs(self.log_rate)

    def sample(self, n: int, seed: int, depth: int = 0) -> np.ndarray:
        """n independent points of the self-similar measure via random codes."""
        rng = np.random.default_rng(seed)
        rmax = max(abs(r) for r in self.ratios)
        depth = depth or int(math.ceil(40 / -math.log(rmax)))
        r = np.asarray(self.ratios, dtype=complex)
        c = np.asarray(self.offsets, dtype=complex)
        z = np.zeros(n, dtype=complex)
        for _ in range(depth):
            k = rng.choice(len(r), size=n, p=self.weights)
            z = r[k] * z + c[k]
        return z

    def chaos_game(self, steps: int, seed: int, start: complex = 0j) -> np.ndarray:
        rng = np.random.default_rng(seed)
        r = np.asarray(self.ratios, dtype=complex)
        c = np.asarray(self.offsets, dtype=complex)
        ks = rng.choice(len(r), size=steps, p=self.weights)
        out = np.empty(steps, dtype=complex)
        z = complex(start)
        for i, k in enumerate(ks):
            z = r[k] * z + c[k]
            out[i] = z
        return out


def cantor_ifs() -> IFS:
    """Middle-thirds Cantor set on the real diameter [-1/2, 1/2] of the disc."""
    return IFS((1 / 3, 1 / 3), (-1 / 3, 1 / 3))


def cantor_sample(n: int, seed: int, digits: int = 40) -> np.ndarray:
    """Cantor measure on [0, 1] from random ternary digits in {0, 2}."""
    rng = np.random.default_rng(seed)
    d = 2 * rng.integers(0, 2, size=(n, digits))
    return (d * 3.0 ** -np.arange(1, digits + 1)).sum(axis=1).astype(complex)


# ---------------------------------------------------------------------------
# transversal samples
# ---------------------------------------------------------------------------

@dataclass
class TransversalMeasureSample:
    positions: np.ndarray
    weights: np.ndarray
    total_time: float
    burn_in: float
    transversal: int = 0
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=complex)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.positions.shape != self.weights.shape:
            raise ConfigError("positions and weights differ in length")
        if np.any(self.weights <= 0):
            raise ConfigError("weights must be positive")

    @property
    def hits(self) -> int:
        return int(self.positions.size)


def _torus_hits(rng, n_paths, total, burn_in, box_side):
    """Integer-time positions of flat Brownian motion (generator Laplacian) on the
    unit torus; returns a boolean array (n_paths, n_times) of box visits."""
    times = np.arange(math.ceil(burn_in), math.floor(total) + 1)
    times = times[times > burn_in] if burn_in > 0 else times[times > 0]
    pos = rng.uniform(0, 1, size=(n_paths, 2))
    inside = []
    prev = 0.0
    for t in times:
        pos = np.mod(pos + math.sqrt(2 * (t - prev)) * rng.standard_normal((n_paths, 2)), 1.0)
        prev = t
        inside.append(np.all(pos < box_side, axis=1))
    return np.array(inside).T if inside else np.zeros((n_paths, 0), bool)


def sample_transversal_measure(system: str = "product", transversal: int = 0, total_time: float = 100.0,
                               burn_in: float = 0.0, seed: int = 0, *, n_paths: int = 1000,
                               nu: Optional[Callable] = None, ifs: Optional[IFS] = None,
                               box_side: float = 0.5, **kwargs) -> TransversalMeasureSample:
    """Hits of a transversal at integer times after burn-in, each of weight 1.

    product: leaves of a product foliation are copies of the flat unit torus
        with a fixed transverse coordinate drawn from nu (default uniform on
        the disc); a hit is recorded when the leaf position is in the box
        [0, box_side)^2.
    ifs: the holonomy pseudogroup is generated by the IFS maps, one random
        map per unit time; every integer time is a hit.
    jouanolou: leafwise Brownian motion on the degree-2 Jouanolou foliation
        (see folialab.leaves.jouanolou_transversal_hits).
    """
    if burn_in >= total_time:
        raise ConfigError("burn-in must be shorter than the total time")
    if burn_in < 0 or total_time <= 0:
        raise ConfigError("times must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    if system == "product":
        if nu is None:
            def nu(r, n):
                return np.sqrt(r.uniform(0, 1, n)) * np.exp(2j * np.pi * r.uniform(0, 1, n))
        coords = nu(rng, n_paths)
        visits = _torus_hits(rng, n_paths, total_time, burn_in, box_side)
        counts = visits.sum(axis=1)
        pos = np.repeat(coords, counts)
    elif system == "ifs":
        if ifs is None:
            raise ConfigError("ifs system needs an IFS")
        steps = int(math.floor(total_time))
        orbit = ifs.chaos_game(steps, int(seed))
        keep = np.arange(1, steps + 1) > burn_in
        pos = orbit[keep]
    elif system == "jouanolou":
        from .leaves import jouanolou_transversal_hits
        return jouanolou_transversal_hits(total_time=total_time, burn_in=burn_in, seed=seed,
                                          transversal=transversal, **kwargs)
    else:
        raise ConfigError(f"unknown system {system!r}")
    if pos.size == 0:
        raise NumericalError("the transversal was never hit")
    return TransversalMeasureSample(pos, np.ones(pos.size), float(total_time), float(burn_in), transversal,
                                    {"system": system})


# ---------------------------------------------------------------------------
# local dimension
# ---------------------------------------------------------------------------

@dataclass
class DimensionFit:
    center: complex
    radii: np.ndarray
    log_measure: np.ndarray
    slope: float
    ci: tuple
    residual: float
    counts: np.ndarray

    def to_dict(self) -> Dict:
        return {"center": [self.center.real, self.center.imag], "radii": self.radii.tolist(),
                "log_measure": self.log_measure.tolist(), "slope": self.slope,
                "ci": list(self.ci), "residual": self.residual}


def radii_grid(r_max: float, n: int = 12, span: float = 6.0) -> np.ndarray:
    """Geometric radii from r_max down to r_max e^{-span}, strictly decreasing."""
    return r_max * np.exp(-np.linspace(0, span, n))


def _wls_slope(x, y, w):
    W = w.sum()
    xm, ym = (w * x).sum() / W, (w * y).sum() / W
    sxx = (w * (x - xm) ** 2).sum()
    slope = (w * (x - xm) * (y - ym)).sum() / sxx
    resid = y - ym - slope * (x - xm)
    return slope, float(np.sqrt((w * resid ** 2).sum() / W))


def local_dimension(sample: TransversalMeasureSample, center: complex = 0j, radii=None, r_max: float = 1.0,
                    n_boot: int = 200, seed: int = 0, min_hits: int = 100, level: float = 0.95) -> DimensionFit:
    """Slope of log mu(D(center, r)) against log r over the inner half of the radii.

    Points are weighted by the sample weights.  Each inner ball must hold at
    least one hit.  The bootstrap resamples hits, which only changes the
    counts in the nested annuli, so it is done by multinomial draws.
    """
    radii = radii_grid(r_max) if radii is None else np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) >= 0):
        raise ConfigError("radii must be strictly decreasing")
    dist = np.abs(sample.positions - center)
    w = sample.weights
    total = w.sum()
    inside = dist < radii[0]
    if inside.sum() < min_hits:
        raise NumericalError(f"only {int(inside.sum())} hits within the largest radius, need {min_hits}")
    # annulus index: k such that radii[k+1] <= dist < radii[k]; the last bin is the inner ball
    idx = np.searchsorted(-radii, -dist[inside], side="left") - 1
    m = len(radii)
    ann = np.bincount(np.clip(idx, 0, m - 1), weights=w[inside], minlength=m)
    hits = np.bincount(np.clip(idx, 0, m - 1), minlength=m)
    mass = np.cumsum(ann[::-1])[::-1]  # mass[k] = mu(D(radii[k]))
    nhit = np.cumsum(hits[::-1])[::-1]
    inner = slice(m // 2, m)
    if np.any(nhit[inner] == 0):
        raise NumericalError("empty balls at the inner radii: the grid is too fine for the sample")
    x = np.log(radii[inner])
    y = np.log(mass[inner] / total)
    wt = nhit[inner].astype(float)
    slope, resid = _wls_slope(x, y, wt)
    rng = np.random.default_rng(seed)
    n_all = int(inside.size)
    probs = np.append(hits, n_all - hits.sum()) / n_all
    boots = []
    # weights are treated as equal within an annulus (exact for unit weights)
    mean_w = np.where(hits > 0, ann / np.maximum(hits, 1), 0.0)
    for _ in range(n_boot):
        draw = rng.multinomial(n_all, probs)[:-1]
        c = np.cumsum(draw[::-1])[::-1][inner]
        if np.any(c == 0):
            continue
        mb = np.cumsum((draw * mean_w)[::-1])[::-1][inner]
        boots.append(_wls_slope(x, np.log(mb / total), c.astype(float))[0])
    if boots:
        lo, hi = np.quantile(boots, [(1 - level) / 2, (1 + level) / 2])
    else:
        lo = hi = float("nan")
    logm = np.full(m, -np.inf)
    logm[mass > 0] = np.log(mass[mass > 0] / total)
    return DimensionFit(complex(center), radii, logm, float(slope), (float(lo), float(hi)), resid, nhit)


def averaged_local_dimension(sample: TransversalMeasureSample, centers, radii=None, r_max: float = 1.0,
                             n_boot: int = 200, seed: int = 0) -> Dict:
    """Slope of the center-averaged log measure over the inner radii.

    Self-similar measures have log-periodic oscillations in log mu(D(x, r))
    whose phase depends on x; averaging over generic centers damps them.
    The per-center slopes are reported as the spread; the interval comes
    from resampling centers.
    """
    centers = np.atleast_1d(np.asarray(centers, dtype=complex))
    if centers.size < 2:
        raise ConfigError("need at least two centers")
    fits = [local_dimension(sample, c, radii, r_max, n_boot=0) for c in centers]
    m = len(fits[0].radii)
    inner = slice(m // 2, m)
    x = np.log(fits[0].radii[inner])
    Y = np.array([f.log_measure[inner] for f in fits])
    slope = float(np.polyfit(x, Y.mean(axis=0), 1)[0])
    rng = np.random.default_rng(seed)
    boots = [np.polyfit(x, Y[rng.integers(0, len(fits), len(fits))].mean(axis=0), 1)[0] for _ in range(n_boot)]
    per = np.array([f.slope for f in fits])
    return {"slope": slope, "ci": [float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975))] if boots else None,
            "per_center": per.tolist(), "spread": [float(per.min()), float(per.max())],
            "radii": fits[0].radii.tolist()}


def measure_decay_check(ifs: IFS, n_range: Sequence[int] = range(2, 9), n_samples: int = 2_000_000,
                        seed: int = 0, n_centers: int = 8, tol: float = 0.05) -> Dict:
    """Decay of nu(D(x, e^{n lambda*})) in n at generic points x of the self-similar measure.

    The fitted exponent should match h*, and the slope of log measure against
    log radius should match h*/|lambda*|.
    """
    n_range = np.asarray(list(n_range), dtype=int)
    if len(n_range) < 2:
        raise ConfigError("need at least two values of n")
    pts = ifs.sample(n_samples, seed)
    centers = ifs.sample(n_centers, seed + 1)
    lam, h = ifs.log_rate, ifs.entropy
    exps, dims = [], []
    for c in centers:
        d = np.abs(pts - c)
        logmass = np.array([np.log(max(np.mean(d < math.exp(n * lam)), 1 / n_samples)) for n in n_range])
        slope = np.polyfit(n_range, logmass, 1)[0]
        exps.append(-slope)
        dims.append(-slope / abs(lam) if lam != 0 else 0.0)
    exps = np.array(exps)
    exponent = float(np.median(exps))
    return {
        "h_star": h, "lambda_star": lam, "exponent": exponent,
        "exponent_spread": [float(exps.min()), float(exps.max())],
        "dimension": float(np.median(dims)), "dimension_target": ifs.dimension if lam != 0 else 0.0,
        "n_range": n_range.tolist(), "pass": bool(abs(exponent - h) <= tol),
    }
