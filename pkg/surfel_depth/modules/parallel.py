"""
This module wraps joblib for the data-parallel maps of the estimator.

Results always come back in submission order, so any order-independent
reduction over them is bit-identical for every thread count.
"""
from typing import Callable, Iterable, Sequence, TypeVar

from joblib import Parallel, delayed

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(func: Callable[[T], R], items: Iterable[T], threads: int) -> list[R]:
    """Apply `func` to every item, using `threads` worker threads when > 1."""
    work: Sequence[T] = list(items)
    if threads <= 1 or len(work) <= 1:
        return [func(item) for item in work]
    runner = Parallel(n_jobs=threads, prefer="threads")
    return list(runner(delayed(func)(item) for item in work))


def chunked(count: int, chunks: int) -> list[range]:
    """Split range(count) into at most `chunks` contiguous ranges."""
    chunks = max(1, min(chunks, count))
    bounds = [count * i // chunks for i in range(chunks + 1)]
    return [
        range(bounds[i], bounds[i + 1])
        for i in range(chunks)
        if bounds[i] < bounds[i + 1]
    ]
