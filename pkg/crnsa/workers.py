"""Replication blocks and their thread scheduling.

Replications are cut into fixed-size blocks of consecutive indices. The
cut never depends on the number of threads, so every block computes the
same arrays whichever worker runs it, and results are returned in block
order.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 1024

T = TypeVar("T")


def default_threads() -> int:
    return os.cpu_count() or 1


def lane_blocks(reps: int, block_size: int = DEFAULT_BLOCK_SIZE, start: int = 0) -> List[np.ndarray]:
    """Replication indices start..start+reps-1 cut into blocks of ``block_size``."""
    if reps < 1:
        raise ValueError("at least one replication is required")
    if block_size < 1:
        raise ValueError("block size must be positive")
    stops = list(range(start, start + reps, block_size)) + [start + reps]
    return [np.arange(lo, hi, dtype=np.int64) for lo, hi in zip(stops, stops[1:])]


def map_blocks(fn: Callable[[np.ndarray], T], reps: int, block_size: int = DEFAULT_BLOCK_SIZE,
               threads: Optional[int] = None) -> List[T]:
    """Apply ``fn`` to every replication block; results come back in block order."""
    blocks = lane_blocks(reps, block_size)
    threads = default_threads() if threads is None else threads
    if threads < 1:
        raise ValueError("thread count must be positive")
    logger.debug(f"Running {reps} replications in {len(blocks)} blocks on {threads} threads")
    if threads == 1 or len(blocks) == 1:
        return [fn(block) for block in blocks]
    with ThreadPoolExecutor(max_workers=min(threads, len(blocks))) as pool:
        return list(pool.map(fn, blocks))


def map_tasks(fn: Callable[[T], object], tasks: List[T], threads: Optional[int] = None) -> list:
    """Run independent tasks (suite cells) concurrently, keeping input order."""
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    with ThreadPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
        return list(pool.map(fn, tasks))
