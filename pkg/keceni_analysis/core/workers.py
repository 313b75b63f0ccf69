"""
Thread pool helpers.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import numpy as np

from keceni_analysis.core.config import settings

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# 命名随机流，子种子 = SeedSequence([seed, stream, task])
STREAMS = {"network": 0, "covariates": 1, "treatment": 2, "outcome": 3, "mc": 4, "hajek": 5, "rep": 6}


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is None or threads < 1:
        return max(1, settings.THREADS)
    return int(threads)


def task_rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), STREAMS[stream], int(index)])
    return np.random.default_rng(ss)


def task_seed(seed: int, stream: str, index: int) -> int:
    """供下游再次派生使用的整型子种子"""
    ss = np.random.SeedSequence([int(seed), STREAMS[stream], int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def parallel_map(func: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """保序 map；threads=1 时直接串行执行"""
    items = list(items)
    n_threads = min(resolve_threads(threads), max(1, len(items)))
    if n_threads == 1:
        return [func(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(func, items))
