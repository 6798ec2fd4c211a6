"""Deterministic process-pool map.

Results always come back in input order, and each item is computed by the same
code path whatever the worker count, so outputs do not depend on parallelism.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Iterable, Sequence

_STATE: dict[str, Any] = {}


def worker_state() -> dict[str, Any]:
    return _STATE


def _init(state: dict[str, Any]) -> None:
    _STATE.clear()
    _STATE.update(state)


def resolve_workers(requested: int | None = None) -> int:
    """Requested worker count, capped by ``MSBASIS_THREADS`` when set."""
    n = 1 if requested is None else max(int(requested), 1)
    cap = os.environ.get("MSBASIS_THREADS")
    if cap:
        n = min(n, max(int(cap), 1))
    return n


def _run_chunk(func, chunk):
    return [func(item) for item in chunk]


def parallel_map(func: Callable, items: Sequence, state: dict[str, Any],
                 workers: int = 1, chunksize: int | None = None) -> list:
    """``[func(x) for x in items]`` with ``state`` visible through :func:`worker_state`.

    ``func`` must be a module-level function so it can be pickled.
    """
    items = list(items)
    workers = resolve_workers(workers)
    if workers <= 1 or len(items) <= 1:
        saved = dict(_STATE)
        _init(state)
        try:
            return [func(x) for x in items]
        finally:
            _init(saved)
    if chunksize is None:
        chunksize = max(1, len(items) // (4 * workers))
    chunks = [items[i:i + chunksize] for i in range(0, len(items), chunksize)]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                             initializer=_init, initargs=(state,)) as pool:
        futures = [pool.submit(_run_chunk, func, c) for c in chunks]
        out: list = []
        for fut in futures:
            out.extend(fut.result())
    return out


def chunked(seq: Iterable, n: int) -> list[list]:
    seq = list(seq)
    return [seq[i:i + n] for i in range(0, len(seq), n)]
