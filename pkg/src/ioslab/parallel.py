"""Worker-count handling.  Work is always split into fixed-size chunks, so the
number of workers never changes any numerical result."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

CHUNK = 64
_jobs: int | None = None


def set_jobs(n: int | None) -> None:
    global _jobs
    _jobs = None if n is None else max(1, int(n))


def jobs() -> int:
    if _jobs is not None:
        return _jobs
    env = os.environ.get("IOSLAB_JOBS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def chunks(n: int, size: int = CHUNK) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def map_ordered(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """``[fn(x) for x in items]``, possibly on a thread pool; order is kept."""
    k = jobs()
    if k <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=k) as pool:
        return list(pool.map(fn, items))
