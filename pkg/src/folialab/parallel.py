"""Deterministic block-parallel Monte Carlo.

Paths are grouped into fixed-size blocks.  Block b draws from a generator
seeded by SeedSequence(seed, spawn_key=(b,)), so path i always sees the same
random stream whatever the worker count or the total number of paths.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List

import numpy as np

from .errors import ConfigError

BLOCK = 2048
WORKERS_ENV = "FOLIALAB_WORKERS"


def resolve_workers(workers=None) -> int:
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                workers = int(env)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        else:
            workers = os.cpu_count() or 1
    workers = int(workers)
    if workers < 1:
        raise ConfigError("worker count must be >= 1")
    return workers


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(block),)))


def _call(args):
    fn, seed, b, size, kwargs = args
    return fn(block_rng(seed, b), size, **kwargs)


def run_blocks(fn: Callable, n: int, seed: int, workers=None, block: int = BLOCK, **kwargs) -> List:
    """Run fn(rng, block_size, **kwargs) for every block; results in block order.

    Every block is simulated at full size and the caller truncates, which keeps
    path i independent of n.
    """
    if n <= 0:
        raise ConfigError("path count must be positive")
    nblocks = -(-int(n) // block)
    tasks = [(fn, seed, b, block, kwargs) for b in range(nblocks)]
    workers = min(resolve_workers(workers), nblocks)
    if workers == 1:
        return [_call(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_call, tasks))


def concat(results, n: int, key=None) -> np.ndarray:
    parts = [r if key is None else r[key] for r in results]
    return np.concatenate(parts, axis=0)[:n]


def mean_stderr(x) -> tuple:
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 0:
        raise ConfigError("empty sample")
    m = float(np.sum(x) / n)
    se = float(np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return m, se
