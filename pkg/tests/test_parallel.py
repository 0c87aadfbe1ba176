import numpy as np
import pytest

from folialab.cocycles import cocycle_identity_check, hR_check, lyapunov_estimate, synthetic_current
from folialab.errors import ConfigError
from folialab.hyperbolic import StepControl, dynkin_check, endpoint_radii, endpoints
from folialab.parallel import BLOCK, resolve_workers, run_blocks

# two blocks, so workers=2 really goes through the process pool
N = BLOCK + 1
COARSE = StepControl(dt=0.02)


def _sums(rng, size):
    return rng.random(size)


def test_run_blocks_independent_of_workers_and_n():
    a = np.concatenate(run_blocks(_sums, N, 4, workers=1))
    b = np.concatenate(run_blocks(_sums, N, 4, workers=2))
    c = np.concatenate(run_blocks(_sums, 3 * BLOCK, 4, workers=2))
    assert np.array_equal(a, b)
    assert np.array_equal(a, c[:a.size])


def test_resolve_workers_env(monkeypatch):
    monkeypatch.setenv("FOLIALAB_WORKERS", "3")
    assert resolve_workers() == 3
    monkeypatch.setenv("FOLIALAB_WORKERS", "x")
    with pytest.raises(ConfigError):
        resolve_workers()
    with pytest.raises(ConfigError):
        resolve_workers(0)


@pytest.mark.parametrize("job", [
    lambda w: endpoint_radii(0.5, N, seed=1, step=COARSE, workers=w),
    lambda w: endpoints(0.5, N, seed=1, step=COARSE, workers=w),
    lambda w: dynkin_check("cosh_distance", t=0.5, N=N, seed=1, step=COARSE, workers=w).to_dict(),
    lambda w: cocycle_identity_check(synthetic_current("poisson"), t=0.5, N=N, seed=1, step=COARSE, workers=w),
    lambda w: hR_check(synthetic_current("fourier"), t=2.0, N=N, seed=1, step=COARSE, workers=w),
    lambda w: lyapunov_estimate("product", t=0.5, N=N, seed=1, step=COARSE, workers=w).to_dict(),
], ids=["endpoint_radii", "endpoints", "dynkin", "identity", "hR", "lyapunov"])
def test_estimators_run_in_process_pool(job):
    serial, pooled = job(1), job(2)
    flat = lambda r: np.concatenate([np.ravel(np.asarray(v, dtype=complex)) for v in _leaves(r)])
    assert np.array_equal(flat(serial), flat(pooled))


def _leaves(r):
    if isinstance(r, dict):
        for k in sorted(r):
            yield from _leaves(r[k])
    elif isinstance(r, (list, tuple)) and r and not np.isscalar(r[0]):
        for v in r:
            yield from _leaves(v)
    elif isinstance(r, (str, bool, type(None))):
        return
    elif hasattr(r, "__dict__") and not isinstance(r, np.ndarray):
        yield from _leaves(vars(r))
    else:
        yield r
