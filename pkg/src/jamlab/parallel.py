"""Deterministic seed derivation and replication-parallel mapping.

Every replication draws from an independent stream derived by hashing
(master_seed, tag, replication_index) with BLAKE2b, so results do not depend
on scheduling, worker count, or completion order.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

ENV_THREADS = "JAMLAB_THREADS"


def derive_seed(master_seed: int, tag: str, index: int) -> int:
    """64-bit stream seed for one replication; fixed function, platform stable."""
    payload = f"{master_seed & 0xFFFFFFFFFFFFFFFF}|{tag}|{index}".encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(master_seed: int, tag: str, index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, tag, index))


def resolve_threads(threads: int | None) -> int:
    if threads is not None and threads > 0:
        return threads
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            n = int(env)
            if n > 0:
                return n
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn: Callable[..., T], args: Sequence[tuple], threads: int | None = None) -> list[T]:
    """Map a picklable function over argument tuples, results in input order."""
    n_workers = min(resolve_threads(threads), max(len(args), 1))
    if n_workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    chunk = max(1, len(args) // (n_workers * 4))
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_call, [fn] * len(args), args, chunksize=chunk))


def _call(fn: Callable[..., T], args: tuple) -> T:
    return fn(*args)
