"""Shared plumbing: named deterministic RNG streams and a thread-pool map.

Every random draw in the repo flows from one root seed through named
sub-streams, so adding a consumer never shifts the draws of another.
"""

import os
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def rng_for(seed, name):
    """Deterministic Generator for a named stream under a root seed.

    The stream key is ``crc32(name)``, so streams are stable across code
    reorderings and independent between names.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def worker_count():
    """Worker cap from DEFNET_THREADS (0 or unset = number of CPUs)."""
    raw = os.environ.get("DEFNET_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DEFNET_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"DEFNET_THREADS must be >= 0, got {n}")
    if n == 0:
        return os.cpu_count() or 1
    return n


def parallel_map(fn, items, threads=None):
    """Map ``fn`` over ``items``, preserving order.

    Runs on a thread pool of ``threads`` workers (default: ``worker_count()``).
    Results are identical to the serial map; callers are responsible for
    passing thread-safe functions.
    """
    items = list(items)
    if threads is None:
        threads = worker_count()
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
