"""
Labeled image batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .enums import CifarLayout, Precision
from .errors import ShapeError
from .tensor import Tensor4


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    """
    Images (n, 3, 32, 32) with pixels in [0, 1] and one class index per image.
    """

    images: Tensor4
    labels: np.ndarray

    def __post_init__(self) -> None:
        n, c, h, w = self.images.shape
        if (c, h, w) != (CifarLayout.CHANNELS, CifarLayout.SIDE, CifarLayout.SIDE):
            raise ShapeError(f"Images must be (n, 3, 32, 32), got {self.images.shape}")
        pixels = self.images.data
        # NaN fails both comparisons
        if n and not np.all((pixels >= 0.0) & (pixels <= 1.0)):
            raise ShapeError("Pixels must lie in [0, 1]")
        labels = np.asarray(self.labels)
        if labels.shape != (n,):
            raise ShapeError(f"Expected {n} labels, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ShapeError(f"Labels must be integers, got {labels.dtype}")
        if n and (labels.min() < 0 or labels.max() >= CifarLayout.CLASSES):
            raise ShapeError("Labels must be class indices in [0, 9]")
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))

    @classmethod
    def from_arrays(
        cls, images: np.ndarray, labels: np.ndarray, precision: Precision = Precision.STANDARD
    ) -> LabeledBatch:
        return cls(Tensor4.from_array(images, precision), np.asarray(labels))

    @property
    def x(self) -> np.ndarray:
        return self.images.data

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, indices: np.ndarray | slice) -> LabeledBatch:
        """Subset by index array or slice, preserving order."""
        return LabeledBatch(Tensor4(self.x[indices]), self.labels[indices])

    def head(self, count: int) -> LabeledBatch:
        return self.take(slice(0, count))

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=CifarLayout.CLASSES)
