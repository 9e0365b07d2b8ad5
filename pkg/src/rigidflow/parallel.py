"""Row-block data parallelism.

Work is split into contiguous row blocks; each block is computed with purely
elementwise or per-pixel operations and the blocks are concatenated in row
order. Reductions always run afterwards on the assembled array, so results
are bit-identical for any thread count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

THREADS_ENV = "RIGIDFLOW_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def row_blocks(height: int, threads: int) -> list[tuple[int, int]]:
    n = max(1, min(int(threads), height))
    edges = np.linspace(0, height, n + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def map_rows(fn: Callable[[int, int], object], height: int, threads: int | None = None) -> list:
    """Call ``fn(r0, r1)`` on each row block and return results in row order."""
    threads = default_threads() if threads is None else threads
    blocks = row_blocks(height, threads)
    if len(blocks) == 1:
        return [fn(*blocks[0])]
    with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
        return list(pool.map(lambda b: fn(*b), blocks))


def concat_rows(parts: list) -> np.ndarray | tuple:
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
    return np.concatenate(parts, axis=0)
