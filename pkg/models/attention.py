"""
Channel attention blocks: the channel-locality (C-Local) block and the
Squeeze-and-Excitation (SE) block it is compared against.

C-Local builds a stacked (average, max) descriptor per channel, mixes the two rows
with F linear 2x1 filters, then slides one short kernel along the channel strand to
produce the pre-gate. SE squeezes with global average pooling and excites through
two dense layers. Both scale the input by a sigmoid gate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from data.enums import DEFAULT_FILTER_RATIO, DEFAULT_STRAND_RATIO, SE_REDUCTION, Precision
from data.errors import ShapeError
from data.tensor import DenseParams

from .layers import dense, dense_bwd, relu, relu_bwd, same_padding, sigmoid, sigmoid_bwd


def clocal_shape_rule(
    channels: int,
    filter_ratio: int = DEFAULT_FILTER_RATIO,
    strand_ratio: int = DEFAULT_STRAND_RATIO,
) -> tuple[int, int]:
    """
    Filter count and strand kernel length for a C-Local block.

    Args:
        channels: Input channel count C
        filter_ratio: F = C / filter_ratio
        strand_ratio: L = C / strand_ratio (8 follows the layer tables, 4 the prose)

    Returns:
        (F, L)

    Raises:
        ShapeError: If C is not divisible by 8 or by either ratio
    """
    for divisor in (SE_REDUCTION, filter_ratio, strand_ratio):
        if divisor < 1 or channels % divisor:
            raise ShapeError(f"Channel count {channels} is not divisible by {divisor}")
    return channels // filter_ratio, channels // strand_ratio


def se_hidden_width(channels: int) -> int:
    if channels % SE_REDUCTION:
        raise ShapeError(f"SE block needs C divisible by {SE_REDUCTION}, got {channels}")
    return channels // SE_REDUCTION


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    """Zero-mean Gaussian with variance 2 / fan_in."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass(frozen=True, eq=False)
class CLocalParams:
    """
    C-Local block parameters.

    Attributes:
        stage1_w: (F, 2) weights combining the average and max rows
        stage1_b: (F,) biases
        stage2_w: (L, F) strand kernel
        stage2_b: (1,) bias
    """

    stage1_w: np.ndarray
    stage1_b: np.ndarray
    stage2_w: np.ndarray
    stage2_b: np.ndarray
    channels: int

    def __post_init__(self) -> None:
        filters = self.stage1_w.shape[0]
        if self.stage1_w.shape != (filters, 2) or self.stage1_b.shape != (filters,):
            raise ShapeError("stage 1 needs (F, 2) weights and (F,) biases")
        if self.stage2_w.ndim != 2 or self.stage2_w.shape[1] != filters:
            raise ShapeError(f"stage 2 kernel must be (L, {filters}), got {self.stage2_w.shape}")
        if self.stage2_b.shape != (1,):
            raise ShapeError("stage 2 has a single bias")
        if self.strand_length > self.channels:
            raise ShapeError(f"Strand kernel {self.strand_length} longer than {self.channels} channels")

    @property
    def filters(self) -> int:
        return self.stage1_w.shape[0]

    @property
    def strand_length(self) -> int:
        return self.stage2_w.shape[0]

    @property
    def param_count(self) -> int:
        return 3 * self.filters + self.strand_length * self.filters + 1

    @classmethod
    def initialize(
        cls,
        channels: int,
        rng: np.random.Generator,
        precision: Precision = Precision.STANDARD,
        filter_ratio: int = DEFAULT_FILTER_RATIO,
        strand_ratio: int = DEFAULT_STRAND_RATIO,
    ) -> CLocalParams:
        """He-normal weights, zero biases."""
        filters, length = clocal_shape_rule(channels, filter_ratio, strand_ratio)
        dtype = precision.dtype
        return cls(
            stage1_w=he_normal(rng, (filters, 2), 2, dtype),
            stage1_b=np.zeros(filters, dtype=dtype),
            stage2_w=he_normal(rng, (length, filters), length * filters, dtype),
            stage2_b=np.zeros(1, dtype=dtype),
            channels=channels,
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "stage1_w": self.stage1_w,
            "stage1_b": self.stage1_b,
            "stage2_w": self.stage2_w,
            "stage2_b": self.stage2_b,
        }


@dataclass(frozen=True, eq=False)
class SEParams:
    """
    SE block parameters: W1 (C/8, C), b1, W2 (C, C/8), b2.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        hidden, channels = self.w1.shape
        if self.w2.shape != (channels, hidden):
            raise ShapeError(f"W2 must be {(channels, hidden)}, got {self.w2.shape}")
        if self.b1.shape != (hidden,) or self.b2.shape != (channels,):
            raise ShapeError("SE bias shapes do not match the dense layers")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def param_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    @classmethod
    def initialize(
        cls, channels: int, rng: np.random.Generator, precision: Precision = Precision.STANDARD
    ) -> SEParams:
        """He-normal weights, zero biases."""
        hidden = se_hidden_width(channels)
        dtype = precision.dtype
        return cls(
            w1=he_normal(rng, (hidden, channels), channels, dtype),
            b1=np.zeros(hidden, dtype=dtype),
            w2=he_normal(rng, (channels, hidden), hidden, dtype),
            b2=np.zeros(channels, dtype=dtype),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


# ---------------------------------------------------------------------------
# Global information extraction
# ---------------------------------------------------------------------------


def build_descriptor(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Stack global average and global max per channel.

    Args:
        x: (n, C, h, w)

    Returns:
        (descriptor, argmax): descriptor is (n, 2, C) with row 0 the means and row 1
        the maxima; argmax is the flat (h, w) index of each maximum, first in
        row-major order on ties
    """
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    argmax = flat.argmax(axis=-1)
    descriptor = np.stack([flat.mean(axis=-1), np.take_along_axis(flat, argmax[..., None], -1)[..., 0]], axis=1)
    return descriptor, argmax


def build_descriptor_bwd(
    grad_descriptor: np.ndarray, argmax: np.ndarray, shape: tuple[int, ...]
) -> np.ndarray:
    """Spread the mean row uniformly and route the max row to each argmax."""
    n, c, h, w = shape
    grad = np.repeat((grad_descriptor[:, 0, :] / (h * w))[..., None], h * w, axis=-1)
    np.put_along_axis(
        grad,
        argmax[..., None],
        np.take_along_axis(grad, argmax[..., None], -1) + grad_descriptor[:, 1, :, None],
        axis=-1,
    )
    return grad.reshape(shape)


def combine_stage1(descriptor: np.ndarray, stage1_w: np.ndarray, stage1_b: np.ndarray) -> np.ndarray:
    """
    Linear 2x1 filters over the stacked rows, no nonlinearity.

    Args:
        descriptor: (n, 2, C)
        stage1_w: (F, 2)
        stage1_b: (F,)

    Returns:
        (n, C, F) map with out[c, f] = w[f, 0] * avg[c] + w[f, 1] * max[c] + b[f]
    """
    if descriptor.ndim != 3 or descriptor.shape[1] != 2:
        raise ShapeError(f"descriptor must be (n, 2, C), got {descriptor.shape}")
    if stage1_w.ndim != 2 or stage1_w.shape[1] != 2 or stage1_b.shape != (stage1_w.shape[0],):
        raise ShapeError(f"stage 1 filter count mismatch: w {stage1_w.shape}, b {stage1_b.shape}")
    return np.einsum("nkc,fk->ncf", descriptor, stage1_w) + stage1_b


def combine_stage1_bwd(
    descriptor: np.ndarray, stage1_w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns:
        (grad_descriptor, grad_w, grad_b)
    """
    grad_descriptor = np.einsum("ncf,fk->nkc", grad_out, stage1_w)
    grad_w = np.einsum("ncf,nkc->fk", grad_out, descriptor)
    return grad_descriptor, grad_w, grad_out.sum(axis=(0, 1))


# ---------------------------------------------------------------------------
# Nearby channel correlation
# ---------------------------------------------------------------------------


def _pad_strand(m: np.ndarray, length: int) -> np.ndarray:
    before, after = same_padding(length)
    return np.pad(m, ((0, 0), (before, after), (0, 0)))


def strand_conv_stage2(m: np.ndarray, stage2_w: np.ndarray, stage2_b: np.ndarray) -> np.ndarray:
    """
    1-D same-padded cross-correlation along the channel strand, summed over maps.

    Args:
        m: (n, C, F) stage-1 map
        stage2_w: (L, F) kernel
        stage2_b: (1,) bias

    Returns:
        (n, C) pre-gate

    Raises:
        ShapeError: If L > C or the kernel's map count differs from F
    """
    n, channels, filters = m.shape
    length = stage2_w.shape[0]
    if length > channels:
        raise ShapeError(f"Strand kernel {length} longer than {channels} channels")
    if stage2_w.shape[1] != filters:
        raise ShapeError(f"Strand kernel has {stage2_w.shape[1]} maps, input has {filters}")
    windows = sliding_window_view(_pad_strand(m, length), length, axis=1)  # (n, C, F, L)
    return np.einsum("ncfl,lf->nc", windows, stage2_w) + stage2_b[0]


def strand_conv_stage2_bwd(
    m: np.ndarray, stage2_w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns:
        (grad_m, grad_w, grad_b)
    """
    n, channels, filters = m.shape
    length = stage2_w.shape[0]
    windows = sliding_window_view(_pad_strand(m, length), length, axis=1)
    grad_w = np.einsum("nc,ncfl->lf", grad_out, windows)

    grad_padded = np.zeros((n, channels + length - 1, filters), dtype=np.result_type(m, grad_out))
    for offset in range(length):
        grad_padded[:, offset : offset + channels, :] += grad_out[:, :, None] * stage2_w[offset]
    before = same_padding(length)[0]
    grad_m = grad_padded[:, before : before + channels, :]
    return grad_m, grad_w, np.array([grad_out.sum()], dtype=stage2_w.dtype)


# ---------------------------------------------------------------------------
# Gating
# ---------------------------------------------------------------------------


def gate_and_scale(x: np.ndarray, pre_gate: np.ndarray) -> np.ndarray:
    """
    y[n, c, h, w] = x[n, c, h, w] * sigmoid(pre_gate[n, c])

    Raises:
        ShapeError: If pre_gate does not match (n, C) of x
    """
    if pre_gate.shape != x.shape[:2]:
        raise ShapeError(f"pre-gate shape {pre_gate.shape} does not match {x.shape[:2]}")
    return x * sigmoid(pre_gate)[:, :, None, None]


def gate_and_scale_bwd(
    x: np.ndarray, gate: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    Args:
        gate: sigmoid(pre_gate), (n, C)

    Returns:
        (grad_x through the direct factor, grad_pre_gate)
    """
    grad_x = grad_out * gate[:, :, None, None]
    grad_gate = (grad_out * x).sum(axis=(2, 3))
    return grad_x, sigmoid_bwd(gate, grad_gate)


# ---------------------------------------------------------------------------
# Full blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BlockCache:
    """Forward intermediates for one attention block call."""

    x: np.ndarray
    gate: np.ndarray
    extras: dict[str, np.ndarray]


def _constant_gate(x: np.ndarray, value: float) -> np.ndarray:
    return np.full(x.shape[:2], value, dtype=x.dtype)


def clocal_gate(x: np.ndarray, p: CLocalParams) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gate vector (n, C) of a C-Local block, plus the intermediates."""
    if x.shape[1] != p.channels:
        raise ShapeError(f"C-Local block built for {p.channels} channels, input has {x.shape[1]}")
    descriptor, argmax = build_descriptor(x)
    combined = combine_stage1(descriptor, p.stage1_w, p.stage1_b)
    pre_gate = strand_conv_stage2(combined, p.stage2_w, p.stage2_b)
    extras = {"descriptor": descriptor, "argmax": argmax, "combined": combined}
    return sigmoid(pre_gate), extras


def clocal_forward(
    x: np.ndarray, p: CLocalParams, gate_override: Optional[float] = None
) -> tuple[np.ndarray, BlockCache]:
    """
    Recalibrate x with the C-Local gate.

    Args:
        x: (n, C, h, w)
        p: Block parameters for C channels
        gate_override: Replace the computed gate with a constant

    Returns:
        (y, cache)
    """
    if gate_override is not None:
        gate = _constant_gate(x, gate_override)
        return x * gate[:, :, None, None], BlockCache(x=x, gate=gate, extras={})
    gate, extras = clocal_gate(x, p)
    return x * gate[:, :, None, None], BlockCache(x=x, gate=gate, extras=extras)


def clocal_backward(
    p: CLocalParams, cache: BlockCache, grad_out: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """
    Exact gradients through the gate factor and the descriptor path.

    Returns:
        (grad_x, grads keyed like ``CLocalParams.as_dict``)
    """
    grad_x, grad_pre = gate_and_scale_bwd(cache.x, cache.gate, grad_out)
    if not cache.extras:
        zeros = {name: np.zeros_like(value) for name, value in p.as_dict().items()}
        return grad_x, zeros

    grad_combined, grad_s2w, grad_s2b = strand_conv_stage2_bwd(cache.extras["combined"], p.stage2_w, grad_pre)
    grad_desc, grad_s1w, grad_s1b = combine_stage1_bwd(cache.extras["descriptor"], p.stage1_w, grad_combined)
    grad_x = grad_x + build_descriptor_bwd(grad_desc, cache.extras["argmax"], cache.x.shape)
    return grad_x, {"stage1_w": grad_s1w, "stage1_b": grad_s1b, "stage2_w": grad_s2w, "stage2_b": grad_s2b}


def se_gate(x: np.ndarray, p: SEParams) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gate vector (n, C) of an SE block, plus the intermediates."""
    if x.shape[1] != p.channels:
        raise ShapeError(f"SE block built for {p.channels} channels, input has {x.shape[1]}")
    squeezed = x.mean(axis=(2, 3))
    hidden = dense(squeezed, DenseParams(p.w1, p.b1))
    excited = dense(relu(hidden), DenseParams(p.w2, p.b2))
    return sigmoid(excited), {"squeezed": squeezed, "hidden": hidden}


def se_forward(
    x: np.ndarray, p: SEParams, gate_override: Optional[float] = None
) -> tuple[np.ndarray, BlockCache]:
    """
    y = x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)

    Returns:
        (y, cache)
    """
    if gate_override is not None:
        gate = _constant_gate(x, gate_override)
        return x * gate[:, :, None, None], BlockCache(x=x, gate=gate, extras={})
    gate, extras = se_gate(x, p)
    return x * gate[:, :, None, None], BlockCache(x=x, gate=gate, extras=extras)


def se_backward(
    p: SEParams, cache: BlockCache, grad_out: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """
    Returns:
        (grad_x, grads keyed like ``SEParams.as_dict``)
    """
    grad_x, grad_pre = gate_and_scale_bwd(cache.x, cache.gate, grad_out)
    if not cache.extras:
        return grad_x, {name: np.zeros_like(value) for name, value in p.as_dict().items()}

    hidden = cache.extras["hidden"]
    grad_act, grad_w2, grad_b2 = dense_bwd(relu(hidden), DenseParams(p.w2, p.b2), grad_pre)
    grad_hidden = relu_bwd(hidden, grad_act)
    grad_sq, grad_w1, grad_b1 = dense_bwd(cache.extras["squeezed"], DenseParams(p.w1, p.b1), grad_hidden)
    h, w = cache.x.shape[2:]
    grad_x = grad_x + (grad_sq / (h * w))[:, :, None, None]
    return grad_x, {"w1": grad_w1, "b1": grad_b1, "w2": grad_w2, "b2": grad_b2}


def block_backward(
    x: np.ndarray, params: CLocalParams | SEParams, grad_out: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """
    Recompute the forward pass of either block and return its gradients.

    Raises:
        ShapeError: If grad_out does not match x
    """
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input {x.shape}")
    if isinstance(params, CLocalParams):
        _, cache = clocal_forward(x, params)
        return clocal_backward(params, cache, grad_out)
    _, cache = se_forward(x, params)
    return se_backward(params, cache, grad_out)
