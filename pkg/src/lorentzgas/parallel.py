"""Ordered thread-pool map; the compiled kernels release the GIL."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """``[fn(x) for x in items]`` evaluated on ``workers`` threads.

    Results come back in input order, so any reduction done afterwards is
    independent of the worker count.
    """
    items = list(items)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
