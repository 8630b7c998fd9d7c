from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from tqdm import tqdm

T = TypeVar("T")
R = TypeVar("R")


def sweep_map(
    fn: Callable[[T], R],
    items: Iterable[T],
    *,
    workers: int = 1,
    show_progress: bool = False,
    desc: str = "Sweeping",
    unit: str = " items",
) -> list[R]:
    """
    Apply `fn` to every item and return the results in input order.

    Args:
        fn: Work for one item; must not share mutable state with other calls.
        items: Work items.
        workers: Thread count; 1 runs inline.
        show_progress: Display progress via tqdm.
        desc: Progress bar label.
        unit: Progress bar unit.

    Returns:
        Results in the order of `items`, independent of `workers`.
    """
    work = list(items)
    progress_bar = tqdm(total=len(work), desc=desc, unit=unit, leave=True) if show_progress else None
    try:
        if workers <= 1:
            results = []
            for item in work:
                results.append(fn(item))
                if progress_bar is not None:
                    progress_bar.update(1)
            return results
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, item) for item in work]
            ordered = []
            for future in futures:
                ordered.append(future.result())
                if progress_bar is not None:
                    progress_bar.update(1)
            return ordered
    finally:
        if progress_bar is not None:
            progress_bar.close()
