"""
Random horizontal flips and integer pixel shifts.
"""

from __future__ import annotations

import numpy as np

from config.settings import AugmentConfig
from data.enums import FillMode
from data.labeled_batch import LabeledBatch
from data.tensor import Tensor4


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    """Mirror a (c, h, w) image left to right."""
    return image[..., ::-1]


def shift_image(image: np.ndarray, dx: int, dy: int, fill: FillMode = FillMode.NEAREST) -> np.ndarray:
    """
    Translate a (c, h, w) image so that output (r, c) = input (r - dy, c - dx).

    Vacated pixels replicate the nearest edge row/column, or are zero.
    """
    if dx == 0 and dy == 0:
        return image.copy()
    margin = max(abs(dx), abs(dy))
    pad = ((0, 0), (margin, margin), (margin, margin))
    if fill is FillMode.NEAREST:
        padded = np.pad(image, pad, mode="edge")
    else:
        padded = np.pad(image, pad, mode="constant")
    h, w = image.shape[1:]
    return padded[:, margin - dy : margin - dy + h, margin - dx : margin - dx + w]


def draw_transforms(count: int, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-image flip flags (count,) and (dx, dy) offsets (count, 2).

    Offsets are uniform over the integers in [-max_shift, max_shift], independent per axis.
    """
    flips = rng.random(count) < cfg.flip_prob
    shifts = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=(count, 2))
    return flips, shifts


def sample_transforms(
    indices: np.ndarray, cfg: AugmentConfig, seed: int, epoch: int
) -> tuple[np.ndarray, np.ndarray]:
    """Transforms for dataset samples ``indices``, each drawn from ``default_rng([seed, epoch, index])``."""
    flips = np.zeros(len(indices), dtype=bool)
    shifts = np.zeros((len(indices), 2), dtype=np.int64)
    for row, index in enumerate(indices):
        flip, shift = draw_transforms(1, cfg, np.random.default_rng([seed, epoch, int(index)]))
        flips[row], shifts[row] = flip[0], shift[0]
    return flips, shifts


def augment(
    batch: LabeledBatch, cfg: AugmentConfig, seed: int, epoch: int, indices: np.ndarray | None = None
) -> LabeledBatch:
    """
    Flip then shift every image by its own seeded draw.

    Labels, shape and the [0, 1] pixel range are preserved.

    Args:
        batch: Source images
        cfg: Augmentation settings; a disabled config returns the batch unchanged
        seed: Run seed
        epoch: Epoch number
        indices: Position of each image in the training set; defaults to 0..n-1

    Returns:
        New LabeledBatch
    """
    if not cfg.enabled:
        return batch
    if indices is None:
        indices = np.arange(len(batch))
    flips, shifts = sample_transforms(indices, cfg, seed, epoch)
    out = np.empty_like(batch.x)
    for index, image in enumerate(batch.x):
        if flips[index]:
            image = flip_horizontal(image)
        dx, dy = shifts[index]
        out[index] = shift_image(image, int(dx), int(dy), cfg.fill)
    return LabeledBatch(Tensor4(out), batch.labels.copy())
