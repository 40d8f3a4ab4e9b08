"""
Order-preserving parallel map over a process pool.
"""
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import progressbar
from structlog import get_logger

logger = get_logger()

T = TypeVar('T')
R = TypeVar('R')


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1, progress: bool = False,
                 chunksize: Optional[int] = None) -> List[R]:
    """
    Applies ``fn`` to every item and returns the results in input order.

    ``fn`` must be a module-level function when ``workers > 1``. Results never depend on the
    number of workers.
    """
    items = list(items)
    bar = progressbar.ProgressBar(max_value=len(items)) if progress and items else None
    results: List[R] = []
    if workers <= 1 or len(items) <= 1:
        for i, item in enumerate(items):
            results.append(fn(item))
            if bar:
                bar.update(i + 1)
    else:
        chunksize = chunksize or max(1, len(items) // (workers * 4))
        with ProcessPoolExecutor(max_workers=workers) as executor:
            for i, result in enumerate(executor.map(fn, items, chunksize=chunksize)):
                results.append(result)
                if bar:
                    bar.update(i + 1)
    if bar:
        bar.finish()
    return results
