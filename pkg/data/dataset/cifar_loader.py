"""
CIFAR-10 binary format reader and writer, plus a seeded synthetic stand-in.

Each record is one label byte followed by 3072 pixel bytes: the red plane, then
green, then blue, each 32x32 row-major.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
import structlog

from data.enums import CifarLayout, FileConstants
from data.errors import DatasetError
from data.labeled_batch import LabeledBatch

log = structlog.get_logger(__name__)

_IMAGE_SHAPE = (CifarLayout.CHANNELS, CifarLayout.SIDE, CifarLayout.SIDE)


def decode_cifar10_records(raw: bytes | np.ndarray, source: str = "<bytes>") -> LabeledBatch:
    """
    Decode concatenated records into a LabeledBatch with pixels scaled by 1/255.

    Raises:
        DatasetError: If the size is not a whole number of records or a label exceeds 9
    """
    buffer = np.frombuffer(raw, dtype=np.uint8) if isinstance(raw, (bytes, bytearray)) else raw
    if buffer.size == 0 or buffer.size % CifarLayout.RECORD_SIZE:
        raise DatasetError(
            f"{source}: size {buffer.size} is not a positive multiple of {int(CifarLayout.RECORD_SIZE)}"
        )
    records = buffer.reshape(-1, CifarLayout.RECORD_SIZE)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CifarLayout.CLASSES:
        bad = int(np.argmax(labels >= CifarLayout.CLASSES))
        raise DatasetError(f"{source}: record {bad} has label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, *_IMAGE_SHAPE).astype(np.float32) / np.float32(255.0)
    return LabeledBatch.from_arrays(images, labels)


def encode_cifar10_records(batch: LabeledBatch) -> bytes:
    """Inverse of ``decode_cifar10_records`` for pixels that are multiples of 1/255."""
    pixels = np.rint(batch.x.reshape(len(batch), -1) * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise DatasetError("Pixels must lie in [0, 1] to encode")
    records = np.empty((len(batch), CifarLayout.RECORD_SIZE), dtype=np.uint8)
    records[:, 0] = batch.labels
    records[:, 1:] = pixels.astype(np.uint8)
    return records.tobytes()


def read_cifar10_file(path: Path) -> LabeledBatch:
    """
    Read one batch file.

    Raises:
        DatasetError: If the file is missing or malformed
    """
    if not path.is_file():
        raise DatasetError(f"Missing CIFAR-10 file: {path}")
    return decode_cifar10_records(np.fromfile(path, dtype=np.uint8), source=str(path))


def _concat(batches: list[LabeledBatch]) -> LabeledBatch:
    if len(batches) == 1:
        return batches[0]
    return LabeledBatch.from_arrays(
        np.concatenate([batch.x for batch in batches]),
        np.concatenate([batch.labels for batch in batches]),
    )


def load_cifar10(data_dir: Path, limit: Optional[int] = None) -> tuple[LabeledBatch, LabeledBatch]:
    """
    Load the five training files and the test file.

    Args:
        data_dir: Directory holding data_batch_1..5.bin and test_batch.bin
        limit: Keep only the first ``limit`` training images

    Returns:
        (train, test)

    Raises:
        DatasetError: For missing files, bad sizes or bad labels
    """
    data_dir = Path(data_dir)
    missing = [name for name in (*FileConstants.TRAIN_FILES, FileConstants.TEST_FILE)
               if not (data_dir / name).is_file()]
    if missing:
        raise DatasetError(f"Missing CIFAR-10 files in {data_dir}: {', '.join(missing)}")

    train = _concat([read_cifar10_file(data_dir / name) for name in FileConstants.TRAIN_FILES])
    test = read_cifar10_file(data_dir / FileConstants.TEST_FILE)
    if limit is not None:
        if limit < 1:
            raise DatasetError(f"limit must be positive, got {limit}")
        train = train.head(limit)

    log.info(
        "CIFAR dataset loaded",
        n_train=len(train),
        n_test=len(test),
        train_histogram=train.class_histogram().tolist(),
    )
    return train, test


def synthetic_dataset(
    count: int, seed: int = 0, classes: int = CifarLayout.CLASSES, noise: float = 0.15
) -> LabeledBatch:
    """
    Seeded labeled set for runs without the real dataset.

    Each class has a random prototype image; samples are the prototype plus
    Gaussian noise, clipped to [0, 1] and quantized to multiples of 1/255 so the
    set survives an encode/decode round trip.

    Raises:
        DatasetError: For a non-positive count or classes outside [1, 10]
    """
    if count < 1:
        raise DatasetError(f"Synthetic set needs at least one sample, got {count}")
    if not 1 <= classes <= CifarLayout.CLASSES:
        raise DatasetError(f"classes must be in [1, {int(CifarLayout.CLASSES)}], got {classes}")
    rng = np.random.default_rng(seed)
    prototypes = rng.uniform(0.2, 0.8, size=(classes, *_IMAGE_SHAPE))
    labels = np.arange(count) % classes
    rng.shuffle(labels)
    images = prototypes[labels] + rng.normal(0.0, noise, size=(count, *_IMAGE_SHAPE))
    images = np.rint(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    return LabeledBatch.from_arrays(images, labels)


def synthetic_split(count: int, seed: int = 0, classes: int = CifarLayout.CLASSES) -> tuple[LabeledBatch, LabeledBatch]:
    """Synthetic train set of ``count`` images and a test set a fifth that size."""
    held_out = max(1, count // 5)
    full = synthetic_dataset(count + held_out, seed, classes)
    train, test = full.head(count), full.take(slice(count, None))
    log.info("synthetic dataset generated", n_train=len(train), n_test=len(test), seed=seed)
    return train, test
