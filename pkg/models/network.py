"""
Model state construction, forward and backward passes, parameter counting.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
import structlog

from data.enums import AttentionKind, NormMode, ParamRole, Precision
from data.errors import ShapeError
from data.tensor import Tensor4

from .arch_spec import ArchSpec, build_arch_spec
from .units import Cache, Context, Init, ParamSpec, Unit, build_units

log = structlog.get_logger(__name__)


@lru_cache(maxsize=32)
def units_for(spec: ArchSpec) -> tuple[Unit, ...]:
    """Executable units for a spec (units are stateless, so they are shared)."""
    return tuple(build_units(spec))


@dataclass
class ModelState:
    """
    Named parameters, BN running statistics and the architecture they belong to.

    Train-mode forward passes replace BN running statistics in ``buffers``; keep
    to a single writer while training.
    """

    spec: ArchSpec
    params: dict[str, np.ndarray]
    roles: dict[str, ParamRole]
    buffers: dict[str, np.ndarray]
    precision: Precision = Precision.STANDARD
    units: tuple[Unit, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.units = units_for(self.spec)
        expected = [spec.name for unit in self.units for spec in unit.param_specs()]
        if len(set(expected)) != len(expected):
            raise ShapeError("Parameter names must be unique")
        missing = set(expected) - set(self.params)
        if missing:
            raise ShapeError(f"Missing parameters: {sorted(missing)[:5]}")

    @property
    def fingerprint(self) -> int:
        return self.spec.fingerprint

    def copy(self) -> ModelState:
        return ModelState(
            spec=self.spec,
            params={name: value.copy() for name, value in self.params.items()},
            roles=dict(self.roles),
            buffers={name: value.copy() for name, value in self.buffers.items()},
            precision=self.precision,
        )

    def names_with_roles(self, roles: frozenset[ParamRole]) -> list[str]:
        return [name for name, role in self.roles.items() if role in roles]


def _initial_value(spec: ParamSpec, seed: int, dtype: np.dtype) -> np.ndarray:
    match spec.init:
        case Init.ZEROS:
            return np.zeros(spec.shape, dtype=dtype)
        case Init.ONES:
            return np.ones(spec.shape, dtype=dtype)
    # One stream per name keeps shared layers identical across attention variants
    rng = np.random.default_rng([seed, zlib.crc32(spec.name.encode("utf-8"))])
    return (rng.standard_normal(spec.shape) * np.sqrt(2.0 / spec.fan_in)).astype(dtype)


def build_model(spec: ArchSpec, seed: int = 0, precision: Precision = Precision.STANDARD) -> ModelState:
    """
    Initialize a model: He-normal conv/dense/attention weights, zero biases,
    BN gamma=1 and beta=0, running mean 0 and variance 1.

    Args:
        spec: Validated architecture
        seed: Initialization seed
        precision: Parameter precision

    Returns:
        ModelState, deterministic given (spec, seed, precision)
    """
    dtype = precision.dtype
    params: dict[str, np.ndarray] = {}
    roles: dict[str, ParamRole] = {}
    buffers: dict[str, np.ndarray] = {}
    for unit in units_for(spec):
        for param in unit.param_specs():
            params[param.name] = _initial_value(param, seed, dtype)
            roles[param.name] = param.role  # type: ignore[assignment]
        for buffer in unit.buffer_specs():
            buffers[buffer.name] = _initial_value(buffer, seed, dtype)

    model = ModelState(spec=spec, params=params, roles=roles, buffers=buffers, precision=precision)
    log.debug("model built", arch=spec.name, attention=spec.attention, params=count_params(model))
    return model


def count_params(model: ModelState) -> int:
    """Total learnable scalars, excluding BN running statistics."""
    return int(sum(value.size for value in model.params.values()))


def attention_param_count(model: ModelState) -> int:
    return int(
        sum(
            model.params[name].size
            for name in model.names_with_roles(
                frozenset({ParamRole.ATTENTION_WEIGHT, ParamRole.ATTENTION_BIAS})
            )
        )
    )


@dataclass
class ForwardPass:
    """Logits plus everything the backward pass needs."""

    logits: np.ndarray
    caches: list[Cache]
    shapes: list[tuple[str, tuple[int, ...]]]


def _as_input(model: ModelState, x: np.ndarray | Tensor4) -> np.ndarray:
    data = x.data if isinstance(x, Tensor4) else np.asarray(x)
    spec = model.spec
    expected = (spec.input_channels, spec.input_size, spec.input_size)
    if data.ndim != 4 or data.shape[1:] != expected:
        raise ShapeError(f"Model input must be (n, {', '.join(map(str, expected))}), got {data.shape}")
    return data.astype(model.precision.dtype, copy=False)


def forward_pass(
    model: ModelState,
    x: np.ndarray | Tensor4,
    mode: NormMode = NormMode.INFER,
    gate_override: Optional[float] = None,
) -> ForwardPass:
    """
    Run every unit in order, keeping caches and per-unit output shapes.

    Raises:
        ShapeError: If x is not (n, 3, 32, 32)
    """
    out = _as_input(model, x)
    ctx = Context(mode=mode, gate_override=gate_override)
    caches: list[Cache] = []
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for unit in model.units:
        out, cache = unit.forward(model, out, ctx)
        caches.append(cache)
        shapes.append((unit.name, out.shape))
    return ForwardPass(logits=out, caches=caches, shapes=shapes)


def model_forward(
    model: ModelState,
    x: np.ndarray | Tensor4,
    mode: NormMode = NormMode.INFER,
    gate_override: Optional[float] = None,
) -> np.ndarray:
    """
    Logits (n, classes) for a batch of (n, 3, 32, 32) images.

    Args:
        gate_override: Force every attention gate to this constant
    """
    return forward_pass(model, x, mode, gate_override).logits


def model_backward(model: ModelState, forward: ForwardPass, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for a recorded forward pass."""
    grads: dict[str, np.ndarray] = {}
    grad = grad_logits
    for unit, cache in zip(reversed(model.units), reversed(forward.caches)):
        grad = unit.backward(model, cache, grad, grads)
    return grads


def build_named_model(
    arch: str,
    attention: str | AttentionKind = AttentionKind.NONE,
    seed: int = 0,
    strand_ratio: Optional[int] = None,
    filter_ratio: Optional[int] = None,
    precision: Precision = Precision.STANDARD,
) -> ModelState:
    """Convenience wrapper building the ArchSpec from names."""
    kwargs = {}
    if strand_ratio is not None:
        kwargs["strand_ratio"] = strand_ratio
    if filter_ratio is not None:
        kwargs["filter_ratio"] = filter_ratio
    return build_model(build_arch_spec(arch, attention, **kwargs), seed, precision)
