"""
Epoch-deterministic mini-batching and a bounded prefetch pipeline.
"""

from __future__ import annotations

import math
import queue
import threading
from typing import Iterable, Iterator, TypeVar

import numpy as np
import structlog

from config.settings import AugmentConfig
from data.labeled_batch import LabeledBatch
from utils.runtime import RuntimeContext

from .augment import augment

log = structlog.get_logger(__name__)

T = TypeVar("T")

_DONE = object()
_PUT_TIMEOUT = 0.1


def num_batches(count: int, batch_size: int) -> int:
    return math.ceil(count / batch_size)


def epoch_order(count: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """Permutation of range(count) seeded by ``shuffle_seed ^ epoch``."""
    return np.random.default_rng(shuffle_seed ^ epoch).permutation(count)


def batch_iter(
    data: LabeledBatch, batch_size: int, shuffle_seed: int, epoch: int = 0
) -> Iterator[LabeledBatch]:
    """
    Yield shuffled mini-batches covering ``data`` exactly once.

    The last partial batch is kept.

    Raises:
        ValueError: If batch_size < 1
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(data), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        yield data.take(order[start : start + batch_size])


def augmented_batches(
    data: LabeledBatch, batch_size: int, seed: int, epoch: int, cfg: AugmentConfig
) -> Iterator[LabeledBatch]:
    """
    Shuffled batches, each image augmented by draws from ``default_rng([seed, epoch, index])``.

    ``index`` is the image's position in ``data``, so a transform depends on neither
    batch_size nor the thread that produced the batch.

    Raises:
        ValueError: If batch_size < 1
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(data), seed, epoch)
    for start in range(0, len(order), batch_size):
        indices = order[start : start + batch_size]
        yield augment(data.take(indices), cfg, seed, epoch, indices)


def prefetch(items: Iterable[T], depth: int = 2) -> Iterator[T]:
    """
    Produce items on a background thread through a bounded queue.

    Runs inline in strict-sequential mode. Exceptions raised by the producer are
    re-raised in the consumer.
    """
    if RuntimeContext().strict:
        yield from items
        return

    buffer: queue.Queue = queue.Queue(maxsize=max(1, depth))
    stop = threading.Event()

    def offer(item: object) -> bool:
        """Block until ``item`` is queued or the consumer has gone away."""
        while not stop.is_set():
            try:
                buffer.put(item, timeout=_PUT_TIMEOUT)
                return True
            except queue.Full:
                continue
        return False

    def produce() -> None:
        try:
            for item in items:
                if not offer(item):
                    log.debug("prefetch_abandoned")
                    return
            offer(_DONE)
        except BaseException as exc:  # forwarded to the consumer
            offer(exc)

    worker = threading.Thread(target=produce, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=1.0)
