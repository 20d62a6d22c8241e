"""
Tensor container and layer parameter structures.

Every activation and weight lives in the channel-major ``(n, c, h, w)`` layout,
row-major within a plane. Kernels in ``models.layers`` operate on the raw arrays;
``Tensor4`` validates them where data enters the stack.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .enums import BN_EPSILON, BN_MOMENTUM, PaddingMode, Precision
from .errors import ShapeError


@dataclass(frozen=True, eq=False)
class Tensor4:
    """
    Rank-4 numeric array in (batch, channel, height, width) order.

    Attributes:
        data: Contiguous float32 (standard) or float64 (wide) array
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        """Validate rank, dimensions and dtype."""
        if self.data.ndim != 4:
            raise ShapeError(f"Tensor4 needs rank 4, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"Tensor4 dimensions must be >= 1, got {self.data.shape}")
        if self.data.dtype not in (np.float32, np.float64):
            raise ShapeError(f"Tensor4 holds float32 or float64, got {self.data.dtype}")
        if not self.data.flags.c_contiguous:
            object.__setattr__(self, "data", np.ascontiguousarray(self.data))

    @classmethod
    def zeros(
        cls, n: int, c: int, h: int, w: int, precision: Precision = Precision.STANDARD
    ) -> Tensor4:
        """Create a zero tensor."""
        return cls(np.zeros((n, c, h, w), dtype=precision.dtype))

    @classmethod
    def from_array(cls, array: np.ndarray, precision: Precision = Precision.STANDARD) -> Tensor4:
        """Wrap an array, converting it to the requested precision."""
        return cls(np.ascontiguousarray(array, dtype=precision.dtype))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data)

    def at(self, n: int, c: int, h: int, w: int) -> float:
        """
        Bounds-checked element access.

        Raises:
            IndexError: If any index falls outside its dimension
        """
        for index, size, axis in zip((n, c, h, w), self.data.shape, "nchw"):
            if not 0 <= index < size:
                raise IndexError(f"Index {axis}={index} outside [0, {size})")
        return float(self.data[n, c, h, w])

    def with_precision(self, precision: Precision) -> Tensor4:
        """Return a copy in another precision."""
        return Tensor4.from_array(self.data, precision)


@dataclass(frozen=True, eq=False)
class ConvParams:
    """
    Convolution weights and geometry.

    Attributes:
        kernels: (out_c, in_c, kh, kw) weights
        bias: out_c values
        stride: Positive step between windows
        padding: valid or same
    """

    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: PaddingMode = PaddingMode.SAME

    def __post_init__(self) -> None:
        if self.kernels.ndim != 4:
            raise ShapeError(f"Conv kernels need rank 4, got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError(
                f"Conv bias length {self.bias.shape} does not match out_c {self.kernels.shape[0]}"
            )
        if self.stride < 1:
            raise ShapeError(f"Conv stride must be >= 1, got {self.stride}")

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernels.shape[2], self.kernels.shape[3]


@dataclass(frozen=True, eq=False)
class BatchNormParams:
    """
    Per-channel batch normalization parameters and running statistics.

    Running statistics are replaced, not mutated: train-mode forward returns a new
    ``BatchNormParams`` carrying the updated averages.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    def __post_init__(self) -> None:
        channels = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != channels:
                raise ShapeError(f"BatchNorm {name} shape differs from gamma {channels}")
        if self.epsilon <= 0:
            raise ValueError("BatchNorm epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("BatchNorm momentum must be in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("BatchNorm running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int, precision: Precision = Precision.STANDARD) -> BatchNormParams:
        """gamma=1, beta=0, running mean 0 and variance 1."""
        dtype = precision.dtype
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def with_running(self, mean: np.ndarray, var: np.ndarray) -> BatchNormParams:
        return replace(self, running_mean=mean, running_var=var)


@dataclass(frozen=True, eq=False)
class DenseParams:
    """Fully connected layer: weight (out, in) and bias (out,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weight.ndim != 2:
            raise ShapeError(f"Dense weight needs rank 2, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"Dense bias shape {self.bias.shape} does not match {self.weight.shape}")
