"""Worker-count policy and an order-preserving parallel map.

``UMF_THREADS`` caps parallelism; unset means one worker per CPU. Results
always come back in input order, so outputs do not depend on scheduling.
"""

from __future__ import annotations

import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

from .errors import UMFError


def worker_cap() -> int:
    raw = os.environ.get("UMF_THREADS")
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UMFError("bad-config", f"UMF_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UMFError("bad-config", "UMF_THREADS must be >= 1")
    return n


# State shared with forked workers; set only for the duration of a map.
_shared: dict = {}


def _call(args):
    fn, item = args
    return fn(_shared, item)


def parallel_map(fn: Callable, items: Sequence, shared: dict | None = None, workers: int | None = None) -> list:
    """``[fn(shared, item) for item in items]``, spread over forked processes.

    ``shared`` reaches the workers through fork, so large read-only state
    (weights, databases) is never pickled. Falls back to a plain loop with
    one worker or where fork is unavailable.
    """
    workers = min(workers or worker_cap(), len(items))
    shared = shared or {}
    if workers <= 1 or "fork" not in multiprocessing.get_all_start_methods():
        return [fn(shared, item) for item in items]
    _shared.clear()
    _shared.update(shared)
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx) as pool:
            chunk = max(1, len(items) // (4 * workers))
            return list(pool.map(_call, ((fn, it) for it in items), chunksize=chunk))
    finally:
        _shared.clear()

