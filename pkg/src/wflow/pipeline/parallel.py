import os
from multiprocessing import Pool
from typing import Any, Callable, List, Tuple

from wflow.utils.progress import tqdm

THREADS_ENV = "WFLOW_THREADS"


def thread_cap(default: int = 1) -> int:
    """Worker cap from ``WFLOW_THREADS``; ``default`` when unset or unparsable."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError:
        return default
    return max(1, value)


def parallel_map_ordered(
    func: Callable[[Any], Tuple[int, Any]],
    args_list: List[Any],
    ncpu: int = 1,
    desc: str = "Processing",
    show_progress: bool = False,
) -> List[Any]:
    """
    Apply `func` to every element of `args_list`, in a process pool when useful.

    - `func(arg)` must return (index, result) and be importable (picklable)
    - the worker count is capped by ``WFLOW_THREADS``
    - results are re-sorted by index, so the output order never depends on the
      number of workers or on scheduling

    Returns: List of results in the same order as `args_list`
    """
    ncpu = max(1, min(ncpu, thread_cap(default=ncpu), len(args_list) or 1))
    if ncpu == 1:
        results = [func(arg) for arg in tqdm(args_list, desc=desc, disable=not show_progress)]
    else:
        with Pool(processes=ncpu) as pool:
            results = []
            for result in tqdm(pool.imap_unordered(func, args_list), total=len(args_list),
                               desc=desc, disable=not show_progress):
                results.append(result)

    results.sort(key=lambda x: x[0])
    return [res[1] for res in results]
