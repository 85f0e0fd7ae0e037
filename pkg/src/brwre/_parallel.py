"""Ordered fan-out of replica work over processes."""

from concurrent.futures import ProcessPoolExecutor
import os


def default_workers():
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def map_replicas(fn, items, workers=None):
    """``[fn(x) for x in items]`` with up to ``workers`` processes.

    Results come back in input order, so aggregates do not depend on the
    worker count or on completion order.  ``fn`` must be picklable.
    """
    items = list(items)
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))
