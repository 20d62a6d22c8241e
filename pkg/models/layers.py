"""
Forward and backward kernels for the layer primitives.

All functions are pure: they read their inputs and return new arrays, so they are
safe to call concurrently on shared read-only parameters. Arrays use the
``(n, c, h, w)`` layout and keep the dtype of their input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from data.enums import ActivationKind, NormMode, PaddingMode
from data.errors import ShapeError
from data.tensor import BatchNormParams, ConvParams, DenseParams


def same_padding(kernel: int) -> tuple[int, int]:
    """
    Padding that keeps a stride-1 output the size of its input.

    Even kernels pad one more cell after than before.

    Args:
        kernel: Kernel length along one axis

    Returns:
        (pad_before, pad_after)
    """
    total = kernel - 1
    return total // 2, total - total // 2


def _padding_for(p: ConvParams) -> tuple[tuple[int, int], tuple[int, int]]:
    if p.padding is PaddingMode.VALID:
        return (0, 0), (0, 0)
    kh, kw = p.kernel_size
    return same_padding(kh), same_padding(kw)


def conv_output_size(size: int, kernel: int, stride: int, pad: tuple[int, int]) -> int:
    return (size + pad[0] + pad[1] - kernel) // stride + 1


def _im2col(x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, int, int]:
    """Padded windows of x as rows: (n * oh * ow, c * kh * kw)."""
    n, c, h, w = x.shape
    kh, kw = p.kernel_size
    pad_h, pad_w = _padding_for(p)
    if h + sum(pad_h) < kh or w + sum(pad_w) < kw:
        raise ShapeError(f"Kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(x, ((0, 0), (0, 0), pad_h, pad_w)) if p.padding is PaddingMode.SAME else x
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, :: p.stride, :: p.stride]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _check_conv_input(x: np.ndarray, p: ConvParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a rank-4 input, got {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, kernels {p.in_channels}")


def conv2d_fwd(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """
    2-D cross-correlation.

    Args:
        x: (n, in_c, h, w) input
        p: Convolution parameters

    Returns:
        (n, out_c, oh, ow) output

    Raises:
        ShapeError: On channel mismatch or a kernel larger than the padded input
    """
    _check_conv_input(x, p)
    n = x.shape[0]
    cols, oh, ow = _im2col(x, p)
    out = cols @ p.kernels.reshape(p.out_channels, -1).T + p.bias
    return np.ascontiguousarray(out.reshape(n, oh, ow, p.out_channels).transpose(0, 3, 1, 2))


def conv2d_bwd(
    x: np.ndarray, p: ConvParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact gradients of ``conv2d_fwd``.

    Returns:
        (grad_x, grad_kernels, grad_bias)
    """
    _check_conv_input(x, p)
    n, c, h, w = x.shape
    kh, kw = p.kernel_size
    cols, oh, ow = _im2col(x, p)
    if grad_out.shape != (n, p.out_channels, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, p.out_channels, oh, ow)}")

    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, p.out_channels)
    grad_kernels = (g.T @ cols).reshape(p.kernels.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    dcols = (g @ p.kernels.reshape(p.out_channels, -1)).reshape(n, oh, ow, c, kh, kw)
    pad_h, pad_w = _padding_for(p)
    grad_xp = np.zeros((n, c, h + sum(pad_h), w + sum(pad_w)), dtype=x.dtype)
    s = p.stride
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    grad_x = grad_xp[:, :, pad_h[0] : pad_h[0] + h, pad_w[0] : pad_w[0] + w]
    return np.ascontiguousarray(grad_x), grad_kernels, grad_bias


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    2x2 max pooling with stride 2.

    Returns:
        (pooled, argmax) where argmax holds the winning cell 0..3 of each window in
        row-major order; ties go to the first cell scanned.

    Raises:
        ShapeError: If height or width is odd
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    argmax = windows.argmax(axis=-1)
    pooled = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return pooled, argmax


def maxpool2x2_bwd(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    """Route each window's gradient to its recorded winner."""
    n, c, oh, ow = grad_out.shape
    routed = (np.arange(4) == argmax[..., None]) * grad_out[..., None]
    return np.ascontiguousarray(
        routed.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * 2, ow * 2)
    )


@dataclass(frozen=True, eq=False)
class BatchNormCache:
    """Intermediate values kept for the backward pass."""

    x_hat: np.ndarray
    inv_std: np.ndarray
    mode: NormMode


def batchnorm(
    x: np.ndarray, p: BatchNormParams, mode: NormMode
) -> tuple[np.ndarray, BatchNormCache, BatchNormParams]:
    """
    Per-channel batch normalization.

    Train mode normalizes with the batch statistics and returns parameters with
    updated running averages; infer mode uses the running statistics and returns
    ``p`` unchanged.

    Returns:
        (y, cache, params)

    Raises:
        ShapeError: On an empty batch, fewer than two samples per channel in train
            mode, or a channel mismatch
    """
    if x.size == 0:
        raise ShapeError("batchnorm received an empty batch")
    if x.shape[1] != p.channels:
        raise ShapeError(f"batchnorm channel mismatch: input {x.shape[1]}, params {p.channels}")
    shape = (1, -1, 1, 1)

    if mode is NormMode.TRAIN:
        samples = x.shape[0] * x.shape[2] * x.shape[3]
        if samples < 2:
            raise ShapeError("batchnorm train mode needs at least 2 samples per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        updated = p.with_running(
            (p.momentum * p.running_mean + (1 - p.momentum) * mean).astype(p.running_mean.dtype),
            (p.momentum * p.running_var + (1 - p.momentum) * var).astype(p.running_var.dtype),
        )
    else:
        mean, var, updated = p.running_mean, p.running_var, p

    inv_std = (1.0 / np.sqrt(var + p.epsilon)).astype(x.dtype)
    x_hat = (x - mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    y = x_hat * p.gamma.reshape(shape) + p.beta.reshape(shape)
    return y, BatchNormCache(x_hat=x_hat, inv_std=inv_std, mode=mode), updated


def batchnorm_bwd(
    grad_out: np.ndarray, cache: BatchNormCache, p: BatchNormParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns:
        (grad_x, grad_gamma, grad_beta)
    """
    shape = (1, -1, 1, 1)
    grad_gamma = (grad_out * cache.x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_xhat = grad_out * p.gamma.reshape(shape)

    if cache.mode is NormMode.INFER:
        return grad_xhat * cache.inv_std.reshape(shape), grad_gamma, grad_beta

    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    sum_g = grad_xhat.sum(axis=(0, 2, 3)).reshape(shape)
    sum_gx = (grad_xhat * cache.x_hat).sum(axis=(0, 2, 3)).reshape(shape)
    grad_x = cache.inv_std.reshape(shape) / m * (m * grad_xhat - sum_g - cache.x_hat * sum_gx)
    return grad_x, grad_gamma, grad_beta


def dense(x: np.ndarray, p: DenseParams) -> np.ndarray:
    """
    y = x W^T + b over a (batch, features) matrix.

    Raises:
        ShapeError: If W's column count differs from x's width
    """
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"dense dimension mismatch: x {x.shape}, W {p.weight.shape}")
    return x @ p.weight.T + p.bias


def dense_bwd(
    x: np.ndarray, p: DenseParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns:
        (grad_x, grad_weight, grad_bias)
    """
    if grad_out.shape != (x.shape[0], p.weight.shape[0]):
        raise ShapeError(f"dense grad_out shape {grad_out.shape} mismatch")
    return grad_out @ p.weight, grad_out.T @ x, grad_out.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_bwd(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form does not overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_bwd(s: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient through a sigmoid given its output ``s``."""
    return grad_out * s * (1 - s)


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last (class) axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(s: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient through a softmax given its output ``s``."""
    return s * (grad_out - (grad_out * s).sum(axis=-1, keepdims=True))


def activation(x: np.ndarray, kind: ActivationKind) -> np.ndarray:
    """Apply an activation by name."""
    match kind:
        case ActivationKind.RELU:
            return relu(x)
        case ActivationKind.SIGMOID:
            return sigmoid(x)
        case ActivationKind.SOFTMAX:
            return softmax(x)
    raise ValueError(f"Unknown activation: {kind}")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Mean cross-entropy of softmax(logits) against integer labels.

    Args:
        logits: (n, classes)
        labels: (n,) integer class indices

    Returns:
        (loss, grad_logits) with the gradient of the batch mean

    Raises:
        ShapeError: If a label falls outside [0, classes)
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise ShapeError(f"label out of range [0, {classes})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))

    grad = softmax(logits)
    grad[rows, labels] -= 1
    return loss, grad / n
