"""Command-line entry point: `folialab <command> [--config FILE] [flags]`.

Configuration files are flat `key = value` text (comments with #).  Flags
override file values.  Reports are JSON with sorted keys; stochastic
commands embed seed, N, t, the git description of the build and wall time.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 tolerance not met.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .errors import ConfigError, FoliaError, ToleranceError
from .geometry import FoliationSpec, jouanolou, linear_spec, random_spec

# command -> (stochastic, {key: (type, default)})
_INT, _FLOAT, _STR, _COMPLEX, _BOOL = int, float, str, complex, bool
COMMANDS: Dict[str, tuple] = {
    "constants": (False, {"degree": (_INT, 2)}),
    "singularities": (False, {"system": (_STR, "jouanolou:2"), "tol": (_FLOAT, 1e-12)}),
    "local-model": (True, {"a": (_COMPLEX, 1 + 0j), "b": (_COMPLEX, 1 + 1j), "n": (_INT, 1000), "t": (_FLOAT, 1.0)}),
    "covering": (True, {"system": (_STR, "jouanolou:2"), "n_calibration": (_INT, 1000), "coverage": (_INT, 100_000),
                        "dt": (_FLOAT, 5e-4), "holdout": (_INT, 0)}),
    "lyapunov": (True, {"system": (_STR, "product"), "t": (_FLOAT, 10.0), "n": (_INT, 4096),
                        "burn_in": (_FLOAT, 2.0)}),
    "entropy-plane": (True, {"t": (_FLOAT, 20.0), "n": (_INT, 100_000), "max_stderr": (_FLOAT, None)}),
    "entropy-leaf": (True, {"ns": (_STR, "5,10,15,20"), "n": (_INT, 100_000), "separation": (_FLOAT, 1.0)}),
    "hd-synthetic": (True, {"current": (_STR, "poisson"), "x": (_COMPLEX, 0j), "t": (_FLOAT, 2.0), "n": (_INT, 20_000)}),
    "hr-check": (True, {"current": (_STR, "poisson"), "x": (_COMPLEX, 0j), "t": (_FLOAT, 20.0), "n": (_INT, 20_000)}),
    "dimension": (True, {"system": (_STR, "cantor"), "n": (_INT, 2_000_000), "t": (_FLOAT, 100.0),
                         "burn_in": (_FLOAT, 10.0), "centers": (_INT, 16), "r_max": (_FLOAT, 1.0)}),
    "decay-check": (True, {"ratio": (_FLOAT, 1 / 3), "n": (_INT, 2_000_000), "tol": (_FLOAT, 0.05)}),
    "diagnostics": (True, {"system": (_STR, "jouanolou"), "t": (_FLOAT, 50.0), "n": (_INT, 200), "dt": (_FLOAT, 2e-3)}),
}
_COMMON = {"seed": (_INT, None), "workers": (_INT, None), "out": (_STR, None), "csv": (_STR, None)}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def read_config_file(path: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _convert(key: str, typ, value):
    if value is None or not isinstance(value, str):
        return value
    try:
        if typ is _COMPLEX:
            return complex(value.replace(" ", "").replace("i", "j"))
        if typ is _BOOL:
            return value.lower() in ("1", "true", "yes", "on")
        if typ is _INT:
            f = float(value)
            if f != int(f):
                raise ValueError
            return int(f)
        return typ(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None


def resolve_config(command: str, file_values: Dict[str, str], flag_values: Dict[str, Any]) -> Dict[str, Any]:
    stochastic, keys = COMMANDS[command]
    schema = dict(_COMMON)
    schema.update(keys)
    unknown = set(file_values) - set(schema)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key for {command}")
    cfg: Dict[str, Any] = {}
    for k, (typ, default) in schema.items():
        v = flag_values.get(k)
        if v is None:
            v = file_values.get(k, default)
        cfg[k] = _convert(k, typ, v)
    if stochastic and cfg["seed"] is None:
        raise ConfigError("seed: required for stochastic commands")
    for k in ("n", "t", "n_calibration", "coverage", "dt", "centers", "r_max", "separation"):
        if k in cfg and cfg[k] is not None and not cfg[k] > 0:
            raise ConfigError(f"{k}: must be positive")
    if cfg.get("workers") is not None and cfg["workers"] < 1:
        raise ConfigError("workers: must be at least 1")
    cfg["command"] = command
    return cfg


def parse_system(text: str) -> FoliationSpec:
    """jouanolou:d | linear:a,b | random:d:seed | path to a spec file."""
    if text.startswith("jouanolou"):
        parts = text.split(":")
        return jouanolou(int(parts[1]) if len(parts) > 1 else 2)
    if text.startswith("linear:"):
        try:
            a, b = (complex(s.replace("i", "j")) for s in text[7:].split(","))
        except ValueError:
            raise ConfigError(f"system: bad linear coefficients in {text!r}") from None
        return linear_spec(a, b)
    if text.startswith("random:"):
        parts = text.split(":")
        return random_spec(int(parts[1]), int(parts[2]) if len(parts) > 2 else 0)
    p = Path(text)
    if p.exists():
        return FoliationSpec.from_text(p.read_text(), name=p.stem)
    raise ConfigError(f"system: unknown selector {text!r}")


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------

def to_jsonable(x):
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return to_jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, (complex, np.complexfloating)):
        return [to_jsonable(float(x.real)), to_jsonable(float(x.imag))]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if hasattr(x, "to_dict"):
        return to_jsonable(x.to_dict())
    return x


def schema_path(command: str) -> Path:
    return Path(__file__).resolve().parent / "schemas" / f"{command}.schema.json"


def git_describe() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"unknown ({__version__})"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_constants(cfg):
    from .dimension import closed_form, jouanolou_dimension
    c = closed_form(cfg["degree"])
    res = {"degree": c.d, "lyapunov": c.lyapunov, "dimension_bound": c.brunella_bound}
    if c.d == 2:
        jd = jouanolou_dimension()
        res["jouanolou_dimension"] = jd
        res["jouanolou_derivation"] = jd.derivation
    table = [("lambda", str(c.lyapunov)), ("bound", str(c.brunella_bound))]
    if c.d == 2:
        table.append(("jouanolou_dim", str(res["jouanolou_dimension"])))
    return res, table


def cmd_singularities(cfg):
    from .geometry import singularities
    spec = parse_system(cfg["system"])
    sings = singularities(spec, tol=cfg["tol"])
    rows = []
    for s in sings:
        rows.append({"location": s.location.array, "chart": s.chart, "eigenvalues": list(s.eigenvalues),
                     "raw_eigenvalues": list(s.raw_eigenvalues), "hyperbolic": s.hyperbolic,
                     "linearization_radius": s.linearization_radius})
    table = [(f"p{i}", "[" + ", ".join(_c(z) for z in r["location"]) + f"]  ratio {_c(r['eigenvalues'][1] / r['eigenvalues'][0])}")
             for i, r in enumerate(rows)]
    return {"system": spec.name, "count": len(rows), "points": rows}, table


def _c(z) -> str:
    return f"{z.real:+.6f}{z.imag:+.6f}i"


def cmd_local_model(cfg):
    from . import cocycles as cc
    from . import local_model as lm
    s = lm.LinearSingularity(cfg["a"], cfg["b"])
    dom = lm.angular_domain(s)
    loop = lm.separatrix_loop(s)
    u0 = 3.0 * complex(np.exp(1j * dom.bisector))
    closed = float(((s.a + s.b) * loop).real)
    two = lm.two_leaf_holonomy(s, u0, loop)
    checks = lm.sector_metric_checks(s, n_samples=200, seed=cfg["seed"])
    ctx = cc.LocalLeafContext(s, cc.synthetic_current("poisson"))
    paths = cc.local_leaf_paths(ctx, u0, cfg["t"], cfg["n"], cfg["seed"])
    add = cc.additivity_check(ctx, paths)
    res = {"a": s.a, "b": s.b, "angular_domain": [dom.lo, dom.hi], "opening": dom.opening,
           "loop_time": loop, "loop_log_derivative": closed, "two_leaf_log_derivative": two["log_derivative"],
           "two_leaf_multiplier": two["multiplier"], "metric_checks": checks, "additivity": add}
    if cfg.get("csv"):
        rows = []
        m = paths.shape[0]
        ks = np.unique(np.linspace(1, m - 1, min(m - 1, 20)).astype(int))
        sub = paths[:, :min(paths.shape[1], 50)]
        for form in cc.FORMS:
            for k in ks:
                vals = cc._cocycle_values(form, sub[:k + 1], ctx)
                rows.extend((pid, k * cfg["t"] / (m - 1), form, float(v)) for pid, v in enumerate(vals))
        _write_csv(cfg["csv"], ["path_id", "t", "form", "value"], rows)
    return res, [("loop_log_derivative", f"{closed:.12g}"), ("two_leaf", f"{two['log_derivative']:.12g}")]


def cmd_covering(cfg):
    from . import leaves as lv
    spec = parse_system(cfg["system"])
    cov = lv.build_covering(spec, seed=cfg["seed"], n_calibration=cfg["n_calibration"], dt=cfg["dt"])
    cov_test = lv.coverage_test(cov, cfg["coverage"], seed=cfg["seed"])
    res = {"covering": cov.to_dict(), "coverage_test": cov_test}
    if cfg["holdout"]:
        Q, D = lv.crossing_batch(cov, cfg["holdout"], seed=cfg["seed"] + 99, dt=cfg["dt"])
        res["holdout"] = {"paths": cfg["holdout"], "violations": int(np.sum(Q > cov.zeta * D)),
                          "max_ratio": float((Q / D).max())}
    if cfg.get("csv"):
        w0 = lv.random_regular_points(cov, 1, cfg["seed"])
        bm = lv.leaf_bm(spec, w0, 1.0, cfg["dt"], seed=cfg["seed"], record=True)
        tr = bm.trace[:, 0]
        _write_csv(cfg["csv"], ["time", "x_re", "x_im", "y_re", "y_im", "z_re", "z_im"],
                   [(t, *np.column_stack([w.real, w.imag]).ravel()) for t, w in zip(bm.times, tr)])
    if cov_test["uncovered"]:
        raise ToleranceError(f"{cov_test['uncovered']} sampled points are not covered")
    return res, [("zeta", f"{cov.zeta:.4g}"), ("delta0", f"{cov.delta0:.4g}"), ("theta", f"{cov.theta:.4g}"),
                 ("uncovered", str(cov_test["uncovered"]))]


def cmd_lyapunov(cfg):
    from .cocycles import lyapunov_estimate
    system = cfg["system"]
    if system.startswith("jouanolou"):
        spec = parse_system(system)
        rep = lyapunov_estimate(spec, t=cfg["t"], N=cfg["n"], seed=cfg["seed"], burn_in=cfg["burn_in"])
    else:
        rep = lyapunov_estimate(system, t=cfg["t"], N=cfg["n"], seed=cfg["seed"], workers=cfg["workers"])
    return rep.to_dict(), [("estimate", f"{rep.estimate:.5g} +- {rep.stderr:.2g}")]


def cmd_entropy_plane(cfg):
    from .hyperbolic import plane_entropy
    rep = plane_entropy(cfg["t"], cfg["n"], cfg["seed"], workers=cfg["workers"], max_stderr=cfg["max_stderr"])
    return rep.to_dict(), [("estimate", f"{rep.estimate:.5g} +- {rep.stderr:.2g}")]


def cmd_entropy_leaf(cfg):
    from .cocycles import hL_separated, plane_endpoints
    try:
        ns = [int(x) for x in cfg["ns"].split(",")]
    except ValueError:
        raise ConfigError("ns: expected comma-separated integers") from None
    ends = plane_endpoints(ns, total=cfg["n"], seed=cfg["seed"], workers=cfg["workers"])
    res = hL_separated(ends, C=cfg["separation"])
    return res, [("rate", f"{res['rate']:.5g}")]


def cmd_hd_synthetic(cfg):
    from .cocycles import cocycle_identity_check, synthetic_current
    res = cocycle_identity_check(synthetic_current(cfg["current"]), x=cfg["x"], t=cfg["t"], N=cfg["n"],
                                 seed=cfg["seed"], workers=cfg["workers"])
    if not res["pass"]:
        raise ToleranceError("identity check failed: discrepancy above 3 combined stderr")
    return res, [("pass", str(res["pass"]))]


def cmd_hr_check(cfg):
    from .cocycles import hR_check, synthetic_current
    res = hR_check(synthetic_current(cfg["current"]), x=cfg["x"], t=cfg["t"], N=cfg["n"], seed=cfg["seed"],
                   workers=cfg["workers"])
    res = to_jsonable(res)
    if not res["pass"]:
        raise ToleranceError("h_R estimate below -3 stderr")
    return res, [("h_R", f"{res['estimate']:.5g} +- {res['stderr']:.2g}")]


def cmd_dimension(cfg):
    from . import dimension as dm
    system = cfg["system"]
    rng = np.random.default_rng(cfg["seed"])
    if system == "disc":
        r = np.sqrt(rng.random(cfg["n"]))
        pos = r * np.exp(2j * np.pi * rng.random(cfg["n"]))
        sample = dm.TransversalMeasureSample(pos, np.ones(cfg["n"]), 0.0, 0.0, 0, {"system": "disc"})
        centers = 0.3 * np.sqrt(rng.random(cfg["centers"])) * np.exp(2j * np.pi * rng.random(cfg["centers"]))
        target = 2.0
        radii = dm.radii_grid(min(cfg["r_max"], 0.5), 12, 4.0)
    elif system in ("cantor", "ifs"):
        ifs = dm.cantor_ifs() if system == "cantor" else dm.IFS((0.25, 0.25), (-0.75, 0.75))
        pos = ifs.sample(cfg["n"], cfg["seed"])
        sample = dm.TransversalMeasureSample(pos, np.ones(pos.size), 0.0, 0.0, 0, {"system": system})
        centers = ifs.sample(cfg["centers"], cfg["seed"] + 1)
        target = ifs.dimension
    elif system in ("product", "jouanolou"):
        sample = dm.sample_transversal_measure(system, total_time=cfg["t"], burn_in=cfg["burn_in"], seed=cfg["seed"])
        centers = sample.positions[rng.integers(0, sample.positions.size, cfg["centers"])]
        target = 0.25 if system == "jouanolou" else None
    else:
        raise ConfigError(f"system: unknown dimension system {system!r}")
    if system != "disc":
        radii = dm.radii_grid(cfg["r_max"])
    res = dm.averaged_local_dimension(sample, centers, radii=radii, seed=cfg["seed"])
    res["target"] = target
    res["hits"] = int(sample.positions.size)
    return res, [("slope", f"{res['slope']:.4f}"), ("target", str(target))]


def cmd_decay_check(cfg):
    from .dimension import IFS, measure_decay_check
    r = cfg["ratio"]
    if not 0 < r < 0.5:
        raise ConfigError("ratio: must lie in (0, 1/2) for disjoint images")
    ifs = IFS((r, r), (-(1 - r), 1 - r))
    res = measure_decay_check(ifs, n_samples=cfg["n"], seed=cfg["seed"], tol=cfg["tol"])
    if not res["pass"]:
        raise ToleranceError(f"decay exponent {res['exponent']:.4f} is not within {cfg['tol']} of {res['h_star']:.4f}")
    return res, [("exponent", f"{res['exponent']:.4f}"), ("h_star", f"{res['h_star']:.4f}")]


def cmd_diagnostics(cfg):
    from .cocycles import integrability_diag
    res = integrability_diag(cfg["system"], T=cfg["t"], N=cfg["n"], seed=cfg["seed"], dt=cfg["dt"])
    return res, [("Q_mean", f"{res['Q']['mean']:.4g}"), ("heavy_tail_flag", str(res["heavy_tail_flag"])),
                 ("rough_bound_violations", str(res["rough_bound"]["violations"]))]


HANDLERS: Dict[str, Callable] = {
    "constants": cmd_constants, "singularities": cmd_singularities, "local-model": cmd_local_model,
    "covering": cmd_covering, "lyapunov": cmd_lyapunov, "entropy-plane": cmd_entropy_plane,
    "entropy-leaf": cmd_entropy_leaf, "hd-synthetic": cmd_hd_synthetic, "hr-check": cmd_hr_check,
    "dimension": cmd_dimension, "decay-check": cmd_decay_check, "diagnostics": cmd_diagnostics,
}


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="folialab", description="Numerical experiments on foliations of P^2.")
    p.add_argument("--version", action="version", version=f"folialab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (stochastic, keys) in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value file; flags override it")
        sp.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
        sp.add_argument("--json", action="store_true", help="print the JSON report instead of a table")
        for k in list(_COMMON) + list(keys):
            sp.add_argument("--" + k.replace("_", "-"), dest=k, default=None, type=str)
    return p


def run(cfg: Dict[str, Any]) -> Dict[str, Any]:
    """Execute a resolved configuration and return the report envelope."""
    saved = os.environ.get("FOLIALAB_WORKERS")
    if cfg.get("workers") is not None:
        os.environ["FOLIALAB_WORKERS"] = str(cfg["workers"])
    t0 = time.perf_counter()
    try:
        result, table = HANDLERS[cfg["command"]](cfg)
    finally:
        if saved is None:
            os.environ.pop("FOLIALAB_WORKERS", None)
        else:
            os.environ["FOLIALAB_WORKERS"] = saved
    wall = time.perf_counter() - t0
    stochastic = COMMANDS[cfg["command"]][0]
    meta = {"command": cfg["command"], "version": __version__, "git_describe": git_describe(), "wall_time": wall}
    if stochastic:
        meta.update({"seed": cfg.get("seed"), "N": cfg.get("n"), "t": cfg.get("t")})
    report = {"meta": meta, "config": {k: v for k, v in cfg.items() if k not in ("out", "csv")},
              "result": result}
    report = to_jsonable(report)
    report["_table"] = table
    return report


def dumps(report: Dict) -> str:
    return json.dumps({k: v for k, v in report.items() if k != "_table"}, sort_keys=True, indent=2)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "print_config", "json")}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, flags)
        if args.print_config:
            for k in sorted(cfg):
                if cfg[k] is not None:
                    v = cfg[k]
                    print(f"{k} = {v.real}{v.imag:+}i" if isinstance(v, complex) else f"{k} = {v}")
            return 0
        report = run(cfg)
    except FoliaError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    text = dumps(report)
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text + "\n")
    if args.json:
        print(text)
    else:
        for k, v in report["_table"]:
            print(f"{k:>24}  {v}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
