"""Thread-pool helpers with deterministic, input-ordered results."""

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "SUPERMOE_THREADS"


def worker_count():
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


def ordered_map(fn, items):
    """``[fn(x) for x in items]``, possibly concurrent, always in input order."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
