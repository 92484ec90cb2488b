"""Order-preserving map that honours ``GWEVAL_THREADS``."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_MIN_ITEMS_PER_WORKER = 256


def thread_count() -> int:
    raw = os.environ.get("GWEVAL_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """``list(map(fn, items))``, possibly on a thread pool; result order never depends on scheduling."""
    items = list(items)
    workers = min(thread_count(), max(1, len(items) // _MIN_ITEMS_PER_WORKER))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
