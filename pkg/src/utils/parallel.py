"""
Thread-pool helpers shared by the solvers and the harness.

Results always come back in input order so that later reductions are
performed in a fixed order, independent of the worker count.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "POLARON_LAB_THREADS"

_override: Optional[int] = None


def set_thread_override(threads: Optional[int]) -> None:
    """Force a worker count (the ``--threads`` flag)."""
    global _override
    if threads is not None and threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    _override = threads


def thread_count(threads: Optional[int] = None) -> int:
    """
    Resolve the number of worker threads.

    Args:
        threads: Explicit request; wins over everything else

    Returns:
        Worker count from the argument, the CLI override, the
        ``POLARON_LAB_THREADS`` environment variable, or the CPU count
    """
    if threads is not None:
        return max(1, int(threads))
    if _override is not None:
        return _override
    env_value = os.getenv(THREADS_ENV)
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, env_value)
    return os.cpu_count() or 1


def parallel_map(
    fn: Callable[[T], R], items: Sequence[T], threads: Optional[int] = None
) -> List[R]:
    """Apply ``fn`` to every item, in order, on a thread pool."""
    workers = min(thread_count(threads), max(1, len(items)))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
