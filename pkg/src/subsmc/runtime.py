"""Deterministic particle-parallel execution.

All randomness is drawn from streams keyed by ``(root_seed, stage, particle,
phase, *extra)``, so a particle's trajectory never depends on which worker
ran it or in what order. Particle phases are parallel maps; everything that
reads the whole cloud runs in the calling process between maps.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from enum import IntEnum

import numpy as np

from .errors import ConfigError, ParticleMapError


class Phase(IntEnum):
    INIT = 0
    RESAMPLE = 1
    MOVE = 2
    PILOT = 3
    REFERENCE = 4
    PILOT_SELECT = 5


def derive_stream(root_seed: int, stage: int, particle: int, phase: int, *extra: int) -> np.random.Generator:
    """Independent generator for one ``(stage, particle, phase)`` cell.

    Built on ``numpy.random.SeedSequence`` with the key as ``spawn_key``, so
    distinct keys hash to distinct, statistically independent PCG64 streams.
    """
    key = (int(stage), int(particle), int(phase)) + tuple(int(e) for e in extra)
    ss = np.random.SeedSequence(int(root_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def resolve_seed(seed):
    """``SUBSMC_SEED`` overrides the configured seed when set."""
    env = os.environ.get("SUBSMC_SEED")
    if env not in (None, ""):
        try:
            return int(env, 0)
        except ValueError:
            raise ConfigError(f"SUBSMC_SEED must be an integer, got {env!r}") from None
    return int(seed)


_CONTEXT = None


def _init_worker(context):
    global _CONTEXT
    _CONTEXT = context


def _apply(fn, start, payload, shared, context):
    n = len(next(iter(payload.values())))
    outputs, failures = [], []
    for i in range(n):
        particle = {k: v[i] for k, v in payload.items()}
        try:
            outputs.append(fn(start + i, particle, shared, context))
        except Exception as exc:  # collected and re-raised at the barrier
            failures.append((start + i, exc))
    return outputs, failures


def _apply_in_worker(fn, start, payload, shared):
    return _apply(fn, start, payload, shared, _CONTEXT)


def _stack(outputs):
    if not outputs:
        return {}
    return {k: np.stack([o[k] for o in outputs]) for k in outputs[0]}


class ParticlePool:
    """Runs per-particle functions over a cloud, serially or in worker processes.

    ``context`` is a large read-only object (the bound problem) installed once
    per worker; ``shared`` is small per-call state (control variate, tuning).
    ``fn(index, particle, shared, context)`` must be a module-level function
    returning a dict of arrays/scalars. Results are independent of ``workers``.
    """

    def __init__(self, workers: int = 1, context=None):
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        self.workers = int(workers)
        self.context = context
        self._executor = None

    def _pool(self):
        if self._executor is None:
            try:
                ctx = mp.get_context("fork")
            except ValueError:  # platforms without fork
                ctx = mp.get_context()
            self._executor = ProcessPoolExecutor(
                max_workers=self.workers, mp_context=ctx,
                initializer=_init_worker, initargs=(self.context,),
            )
        return self._executor

    def map(self, fn, payload: dict, shared=None) -> dict:
        n = len(next(iter(payload.values())))
        if self.workers == 1 or n <= 1:
            outputs, failures = _apply(fn, 0, payload, shared, self.context)
        else:
            bounds = np.linspace(0, n, min(self.workers, n) + 1).astype(int)
            futures = [
                self._pool().submit(
                    _apply_in_worker, fn, int(lo),
                    {k: v[lo:hi] for k, v in payload.items()}, shared,
                )
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if hi > lo
            ]
            outputs, failures = [], []
            for fut in futures:
                out, fail = fut.result()
                outputs.extend(out)
                failures.extend(fail)
        if failures:
            failures.sort(key=lambda t: t[0])
            raise ParticleMapError(failures)
        return _stack(outputs)

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parallel_map(fn, payload: dict, shared=None, workers: int = 1, context=None) -> dict:
    """One-shot :meth:`ParticlePool.map`."""
    with ParticlePool(workers, context) as pool:
        return pool.map(fn, payload, shared)
