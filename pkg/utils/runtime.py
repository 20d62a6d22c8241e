"""
Process-wide runtime settings read from the environment.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Optional, TypeVar

import structlog

from data.enums import THREADS_ENV_VAR
from utils.singleton import singleton

log = structlog.get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@singleton
class RuntimeContext:
    """
    Parallelism cap for evaluation shards, batch prefetch and gradient checks.

    ``CHANLOC_THREADS=1`` selects strict-sequential mode: every map runs in order on
    the calling thread.
    """

    def __init__(self, threads: Optional[int] = None):
        if threads is None:
            threads = self._threads_from_env()
        self.threads = max(1, threads)
        log.debug("runtime configured", threads=self.threads, strict=self.strict)

    @staticmethod
    def _threads_from_env() -> int:
        raw = os.environ.get(THREADS_ENV_VAR, "")
        if not raw:
            return os.cpu_count() or 1
        try:
            return int(raw)
        except ValueError:
            log.warning("ignoring invalid thread count", variable=THREADS_ENV_VAR, value=raw)
            return 1

    @property
    def strict(self) -> bool:
        return self.threads == 1

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Apply fn to every item; results keep input order."""
        items = list(items)
        if self.strict or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=min(self.threads, len(items))) as pool:
            return list(pool.map(fn, items))
