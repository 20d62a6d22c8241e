"""
Executable units built from layer-table rows.

A unit knows the names, shapes and roles of its parameters and implements
forward/backward against a name-keyed parameter store. Parameter names depend only
on the row position, so every attention variant of an architecture shares the
names of its feature-extraction weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any, Optional, Protocol

import numpy as np

from data.enums import (
    DEFAULT_FILTER_RATIO,
    DEFAULT_STRAND_RATIO,
    AttentionKind,
    LayerKind,
    NormMode,
    ParamRole,
    PaddingMode,
)
from data.tensor import BatchNormParams, ConvParams, DenseParams

from . import layers
from .arch_spec import ArchSpec, LayerRecord
from .attention import (
    CLocalParams,
    SEParams,
    clocal_backward,
    clocal_forward,
    clocal_shape_rule,
    se_backward,
    se_forward,
    se_hidden_width,
)


class Init(StrEnum):
    """Initializer names."""

    HE = "he"
    ZEROS = "zeros"
    ONES = "ones"


@dataclass(frozen=True)
class ParamSpec:
    """Declared learnable tensor or buffer."""

    name: str
    shape: tuple[int, ...]
    role: Optional[ParamRole]
    init: Init
    fan_in: int = 1


class Store(Protocol):
    """What units read from and write to (implemented by ``ModelState``)."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]


@dataclass
class Context:
    """Per-call forward options."""

    mode: NormMode = NormMode.INFER
    gate_override: Optional[float] = None


Cache = Any


class Unit:
    """Base class for executable units."""

    name: str
    kind: str = "unit"

    def param_specs(self) -> list[ParamSpec]:
        return []

    def buffer_specs(self) -> list[ParamSpec]:
        return []

    def forward(self, store: Store, x: np.ndarray, ctx: Context) -> tuple[np.ndarray, Cache]:
        raise NotImplementedError

    def backward(
        self, store: Store, cache: Cache, grad: np.ndarray, grads: dict[str, np.ndarray]
    ) -> np.ndarray:
        """Accumulate parameter gradients into ``grads`` and return the input gradient."""
        raise NotImplementedError


@dataclass
class ConvUnit(Unit):
    """Convolution, optional batch normalization, optional ReLU."""

    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    norm: bool = True
    act: bool = True
    kind: str = "conv"

    def param_specs(self) -> list[ParamSpec]:
        fan_in = self.in_channels * self.kernel * self.kernel
        specs = [
            ParamSpec(
                f"{self.name}.weight",
                (self.out_channels, self.in_channels, self.kernel, self.kernel),
                ParamRole.CONV_WEIGHT,
                Init.HE,
                fan_in,
            ),
            ParamSpec(f"{self.name}.bias", (self.out_channels,), ParamRole.CONV_BIAS, Init.ZEROS),
        ]
        if self.norm:
            specs += [
                ParamSpec(f"{self.name}.bn.gamma", (self.out_channels,), ParamRole.BN_GAMMA, Init.ONES),
                ParamSpec(f"{self.name}.bn.beta", (self.out_channels,), ParamRole.BN_BETA, Init.ZEROS),
            ]
        return specs

    def buffer_specs(self) -> list[ParamSpec]:
        if not self.norm:
            return []
        return [
            ParamSpec(f"{self.name}.bn.running_mean", (self.out_channels,), None, Init.ZEROS),
            ParamSpec(f"{self.name}.bn.running_var", (self.out_channels,), None, Init.ONES),
        ]

    def _conv_params(self, store: Store) -> ConvParams:
        return ConvParams(
            store.params[f"{self.name}.weight"],
            store.params[f"{self.name}.bias"],
            stride=self.stride,
            padding=PaddingMode.SAME,
        )

    def _bn_params(self, store: Store) -> BatchNormParams:
        return BatchNormParams(
            gamma=store.params[f"{self.name}.bn.gamma"],
            beta=store.params[f"{self.name}.bn.beta"],
            running_mean=store.buffers[f"{self.name}.bn.running_mean"],
            running_var=store.buffers[f"{self.name}.bn.running_var"],
        )

    def forward(self, store: Store, x: np.ndarray, ctx: Context) -> tuple[np.ndarray, Cache]:
        z = layers.conv2d_fwd(x, self._conv_params(store))
        bn_cache = None
        if self.norm:
            z, bn_cache, updated = layers.batchnorm(z, self._bn_params(store), ctx.mode)
            if ctx.mode is NormMode.TRAIN:
                store.buffers[f"{self.name}.bn.running_mean"] = updated.running_mean
                store.buffers[f"{self.name}.bn.running_var"] = updated.running_var
        pre_act = z
        if self.act:
            z = layers.relu(z)
        return z, (x, bn_cache, pre_act)

    def backward(self, store, cache, grad, grads):
        x, bn_cache, pre_act = cache
        if self.act:
            grad = layers.relu_bwd(pre_act, grad)
        if self.norm:
            grad, grad_gamma, grad_beta = layers.batchnorm_bwd(grad, bn_cache, self._bn_params(store))
            grads[f"{self.name}.bn.gamma"] = grad_gamma
            grads[f"{self.name}.bn.beta"] = grad_beta
        grad_x, grad_w, grad_b = layers.conv2d_bwd(x, self._conv_params(store), grad)
        grads[f"{self.name}.weight"] = grad_w
        grads[f"{self.name}.bias"] = grad_b
        return grad_x


@dataclass
class AttentionUnit(Unit):
    """SE or C-Local block recalibrating the preceding unit's output."""

    name: str
    channels: int
    attention: AttentionKind
    filter_ratio: int = DEFAULT_FILTER_RATIO
    strand_ratio: int = DEFAULT_STRAND_RATIO
    kind: str = "attention"

    def param_specs(self) -> list[ParamSpec]:
        c = self.channels
        weight, bias = ParamRole.ATTENTION_WEIGHT, ParamRole.ATTENTION_BIAS
        if self.attention is AttentionKind.SE:
            hidden = se_hidden_width(c)
            return [
                ParamSpec(f"{self.name}.w1", (hidden, c), weight, Init.HE, c),
                ParamSpec(f"{self.name}.b1", (hidden,), bias, Init.ZEROS),
                ParamSpec(f"{self.name}.w2", (c, hidden), weight, Init.HE, hidden),
                ParamSpec(f"{self.name}.b2", (c,), bias, Init.ZEROS),
            ]
        filters, length = clocal_shape_rule(c, self.filter_ratio, self.strand_ratio)
        return [
            ParamSpec(f"{self.name}.stage1_w", (filters, 2), weight, Init.HE, 2),
            ParamSpec(f"{self.name}.stage1_b", (filters,), bias, Init.ZEROS),
            ParamSpec(f"{self.name}.stage2_w", (length, filters), weight, Init.HE, length * filters),
            ParamSpec(f"{self.name}.stage2_b", (1,), bias, Init.ZEROS),
        ]

    def block_params(self, store: Store) -> CLocalParams | SEParams:
        p = store.params
        n = self.name
        if self.attention is AttentionKind.SE:
            return SEParams(p[f"{n}.w1"], p[f"{n}.b1"], p[f"{n}.w2"], p[f"{n}.b2"])
        return CLocalParams(
            p[f"{n}.stage1_w"], p[f"{n}.stage1_b"], p[f"{n}.stage2_w"], p[f"{n}.stage2_b"], self.channels
        )

    def forward(self, store, x, ctx):
        params = self.block_params(store)
        if isinstance(params, SEParams):
            return se_forward(x, params, ctx.gate_override)
        return clocal_forward(x, params, ctx.gate_override)

    def backward(self, store, cache, grad, grads):
        params = self.block_params(store)
        if isinstance(params, SEParams):
            grad_x, block_grads = se_backward(params, cache, grad)
        else:
            grad_x, block_grads = clocal_backward(params, cache, grad)
        for key, value in block_grads.items():
            grads[f"{self.name}.{key}"] = value
        return grad_x


@dataclass
class PoolUnit(Unit):
    name: str
    kind: str = "maxpool"

    def forward(self, store, x, ctx):
        pooled, argmax = layers.maxpool2x2(x)
        return pooled, argmax

    def backward(self, store, cache, grad, grads):
        return layers.maxpool2x2_bwd(grad, cache)


@dataclass
class GapUnit(Unit):
    """Global average pool to (n, C)."""

    name: str
    kind: str = "gap"

    def forward(self, store, x, ctx):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, store, cache, grad, grads):
        n, c, h, w = cache
        return np.broadcast_to((grad / (h * w))[:, :, None, None], cache).copy()


@dataclass
class DenseUnit(Unit):
    name: str
    in_features: int
    out_features: int
    kind: str = "dense"

    def param_specs(self) -> list[ParamSpec]:
        return [
            ParamSpec(
                f"{self.name}.weight",
                (self.out_features, self.in_features),
                ParamRole.DENSE_WEIGHT,
                Init.HE,
                self.in_features,
            ),
            ParamSpec(f"{self.name}.bias", (self.out_features,), ParamRole.DENSE_BIAS, Init.ZEROS),
        ]

    def _params(self, store: Store) -> DenseParams:
        return DenseParams(store.params[f"{self.name}.weight"], store.params[f"{self.name}.bias"])

    def forward(self, store, x, ctx):
        return layers.dense(x, self._params(store)), x

    def backward(self, store, cache, grad, grads):
        grad_x, grad_w, grad_b = layers.dense_bwd(cache, self._params(store), grad)
        grads[f"{self.name}.weight"] = grad_w
        grads[f"{self.name}.bias"] = grad_b
        return grad_x


@dataclass
class BottleneckUnit(Unit):
    """
    Residual bottleneck: 1x1 reduce, 3x3, 1x1 expand, optional attention on the
    branch, shortcut addition, ReLU.

    The shortcut is the identity when channel counts match and a 1x1 projection
    convolution otherwise.
    """

    name: str
    in_channels: int
    mid_channels: int
    out_channels: int
    attention: AttentionKind = AttentionKind.NONE
    filter_ratio: int = DEFAULT_FILTER_RATIO
    strand_ratio: int = DEFAULT_STRAND_RATIO
    kind: str = "bottleneck"
    branch: list[Unit] = field(init=False)
    projection: Optional[ConvUnit] = field(init=False)

    def __post_init__(self) -> None:
        self.branch = [
            ConvUnit(f"{self.name}.reduce", self.in_channels, self.mid_channels, 1),
            ConvUnit(f"{self.name}.spatial", self.mid_channels, self.mid_channels, 3),
            ConvUnit(f"{self.name}.expand", self.mid_channels, self.out_channels, 1, act=False),
        ]
        if self.attention is not AttentionKind.NONE:
            self.branch.append(
                AttentionUnit(
                    f"{self.name}.attn", self.out_channels, self.attention, self.filter_ratio, self.strand_ratio
                )
            )
        self.projection = None
        if self.in_channels != self.out_channels:
            self.projection = ConvUnit(
                f"{self.name}.shortcut", self.in_channels, self.out_channels, 1, norm=False, act=False
            )

    def _members(self) -> list[Unit]:
        return self.branch + ([self.projection] if self.projection else [])

    def param_specs(self) -> list[ParamSpec]:
        return [spec for unit in self._members() for spec in unit.param_specs()]

    def buffer_specs(self) -> list[ParamSpec]:
        return [spec for unit in self._members() for spec in unit.buffer_specs()]

    def forward(self, store, x, ctx):
        caches = []
        out = x
        for unit in self.branch:
            out, cache = unit.forward(store, out, ctx)
            caches.append(cache)
        shortcut, projection_cache = x, None
        if self.projection:
            shortcut, projection_cache = self.projection.forward(store, x, ctx)
        total = shortcut + out
        return layers.relu(total), (caches, projection_cache, total)

    def backward(self, store, cache, grad, grads):
        caches, projection_cache, total = cache
        grad = layers.relu_bwd(total, grad)
        grad_shortcut = grad
        if self.projection:
            grad_shortcut = self.projection.backward(store, projection_cache, grad, grads)
        for unit, unit_cache in zip(reversed(self.branch), reversed(caches)):
            grad = unit.backward(store, unit_cache, grad, grads)
        return grad + grad_shortcut


def build_units(spec: ArchSpec) -> list[Unit]:
    """
    Translate a layer table into executable units.

    Rows are named by position and kind (``conv0``, ``pool1``, ``block2`` ...); an
    attention block after row ``conv0`` is named ``conv0.attn``.
    """
    units: list[Unit] = []
    channels = spec.input_channels
    for index, record in enumerate(spec.layers):
        units += _units_for(spec, index, record, channels)
        if record.channels:
            channels = record.channels
    return units


def _units_for(spec: ArchSpec, index: int, record: LayerRecord, channels: int) -> list[Unit]:
    match record.kind:
        case LayerKind.CONV:
            name = f"conv{index}"
            units: list[Unit] = [ConvUnit(name, channels, record.channels, record.kernel, record.stride)]
            if record.attention:
                units.append(
                    AttentionUnit(
                        f"{name}.attn", record.channels, spec.attention, spec.filter_ratio, spec.strand_ratio
                    )
                )
            return units
        case LayerKind.HEAD_CONV:
            return [
                ConvUnit(f"head{index}", channels, record.channels, record.kernel, record.stride, False, False)
            ]
        case LayerKind.BOTTLENECK:
            attention = spec.attention if record.attention else AttentionKind.NONE
            return [
                BottleneckUnit(
                    f"block{index}",
                    channels,
                    record.mid_channels,
                    record.channels,
                    attention,
                    spec.filter_ratio,
                    spec.strand_ratio,
                )
            ]
        case LayerKind.MAXPOOL:
            return [PoolUnit(f"pool{index}")]
        case LayerKind.GAP:
            return [GapUnit(f"gap{index}")]
        case LayerKind.DENSE:
            return [DenseUnit(f"fc{index}", channels, record.channels)]
    raise ValueError(f"Unknown layer kind: {record.kind}")
