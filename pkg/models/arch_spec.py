"""
Declarative layer tables for the three architectures.

Each ``ArchSpec`` lists the rows of its table in order with the spatial size after
the row. Attention is recorded per row; the attention kind itself is a property of
the whole spec so the baseline, SE and C-Local variants share row names and
feature-extraction weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from data.enums import (
    DEFAULT_FILTER_RATIO,
    DEFAULT_STRAND_RATIO,
    ArchName,
    AttentionKind,
    CifarLayout,
    LayerKind,
)
from data.errors import ShapeError

from .attention import clocal_shape_rule, se_hidden_width

FEATURE_KINDS = frozenset({LayerKind.CONV, LayerKind.BOTTLENECK})


@dataclass(frozen=True)
class LayerRecord:
    """
    One row of an architecture table.

    Attributes:
        kind: Row type
        channels: Output channels (0 for pooling rows)
        kernel: Square kernel size for convolutions
        stride: Convolution stride
        attention: Whether an attention block follows this row
        output_size: Spatial side length after this row
        mid_channels: Bottleneck inner width
    """

    kind: LayerKind
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    attention: bool = False
    output_size: int = 0
    mid_channels: int = 0


@dataclass(frozen=True)
class ArchSpec:
    """Architecture layout plus the attention variant and block shape ratios."""

    name: ArchName
    attention: AttentionKind
    layers: tuple[LayerRecord, ...]
    strand_ratio: int = DEFAULT_STRAND_RATIO
    filter_ratio: int = DEFAULT_FILTER_RATIO
    input_channels: int = CifarLayout.CHANNELS
    input_size: int = CifarLayout.SIDE
    classes: int = CifarLayout.CLASSES
    fingerprint: int = field(init=False, compare=False)

    def __post_init__(self) -> None:
        self._validate()
        digest = hashlib.blake2b(self.to_json().encode("utf-8"), digest_size=8).digest()
        object.__setattr__(self, "fingerprint", int.from_bytes(digest, "little"))

    def _validate(self) -> None:
        """Check size progression, attention placement and the classifier head."""
        size = self.input_size
        for index, record in enumerate(self.layers):
            match record.kind:
                case LayerKind.CONV | LayerKind.HEAD_CONV:
                    size = -(-size // record.stride)
                case LayerKind.MAXPOOL:
                    size //= 2
                case LayerKind.GAP | LayerKind.DENSE:
                    size = 1
            if record.output_size != size:
                raise ShapeError(
                    f"Row {index} ({record.kind}) declares size {record.output_size}, expected {size}"
                )
            if record.attention:
                if self.attention is AttentionKind.NONE or record.kind not in FEATURE_KINDS:
                    raise ShapeError(f"Row {index} ({record.kind}) cannot carry attention")
                if self.attention is AttentionKind.CLOCAL:
                    clocal_shape_rule(record.channels, self.filter_ratio, self.strand_ratio)
                else:
                    se_hidden_width(record.channels)

        kinds = [record.kind for record in self.layers]
        if LayerKind.DENSE in kinds:
            if kinds[-2:] != [LayerKind.GAP, LayerKind.DENSE] or self.layers[-1].channels != self.classes:
                raise ShapeError("Dense head must be global average pool then a class-width fc")
        elif kinds[-2:] != [LayerKind.HEAD_CONV, LayerKind.GAP] or self.layers[-2].channels != self.classes:
            raise ShapeError("Convolutional head must be a class-width 1x1 conv then global average pool")

    def to_dict(self) -> dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.init}
        data["layers"] = [asdict(record) for record in self.layers]
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=str)

    def describe(self) -> dict[str, Any]:
        """Arch name and block ratios; stored in checkpoints and echoed by the CLI."""
        return {
            "arch": self.name.value,
            "attention": self.attention.value,
            "strand_ratio": self.strand_ratio,
            "filter_ratio": self.filter_ratio,
        }

    @property
    def attention_channels(self) -> list[int]:
        """Channel count of every attached attention block, in order."""
        return [record.channels for record in self.layers if record.attention]


def _conv(channels: int, size: int, attend: bool, kernel: int = 3, stride: int = 1) -> LayerRecord:
    return LayerRecord(LayerKind.CONV, channels, kernel, stride, attend, size)


def _bottleneck(mid: int, channels: int, size: int, attend: bool) -> LayerRecord:
    return LayerRecord(LayerKind.BOTTLENECK, channels, 3, 1, attend, size, mid)


_POOL_16 = LayerRecord(LayerKind.MAXPOOL, output_size=16)
_POOL_8 = LayerRecord(LayerKind.MAXPOOL, output_size=8)
_GAP = LayerRecord(LayerKind.GAP, output_size=1)
_FC10 = LayerRecord(LayerKind.DENSE, channels=CifarLayout.CLASSES, output_size=1)


def _plane_layers(attend: bool) -> tuple[LayerRecord, ...]:
    return (
        _conv(32, 32, attend),
        _POOL_16,
        _conv(64, 16, attend),
        _POOL_8,
        _conv(128, 8, attend),
        _conv(128, 8, attend),
        _GAP,
        _FC10,
    )


def _allcnn_layers(attend: bool) -> tuple[LayerRecord, ...]:
    return (
        _conv(64, 32, attend),
        _conv(64, 32, attend),
        _conv(64, 16, attend, stride=2),
        _conv(128, 16, attend),
        _conv(128, 16, attend),
        _conv(128, 8, attend, stride=2),
        _conv(128, 8, attend, kernel=1),
        LayerRecord(LayerKind.HEAD_CONV, CifarLayout.CLASSES, 1, 1, False, 8),
        _GAP,
    )


def _resnet_layers(attend: bool) -> tuple[LayerRecord, ...]:
    return (
        _conv(32, 32, False),
        _bottleneck(16, 32, 32, attend),
        _POOL_16,
        _bottleneck(32, 64, 16, attend),
        _POOL_8,
        _bottleneck(64, 128, 8, attend),
        _bottleneck(64, 128, 8, attend),
        _GAP,
        _FC10,
    )


_LAYOUTS = {
    ArchName.PLANE: _plane_layers,
    ArchName.ALLCNN: _allcnn_layers,
    ArchName.RESNET: _resnet_layers,
}


def build_arch_spec(
    name: ArchName | str,
    attention: AttentionKind | str = AttentionKind.NONE,
    strand_ratio: int = DEFAULT_STRAND_RATIO,
    filter_ratio: int = DEFAULT_FILTER_RATIO,
) -> ArchSpec:
    """
    Build the layer table for a named architecture.

    Args:
        name: plane, allcnn or resnet
        attention: none, se or clocal
        strand_ratio: C-Local strand kernel length divisor
        filter_ratio: C-Local stage-1 filter count divisor

    Returns:
        Validated ArchSpec

    Raises:
        ValueError: For unknown names
    """
    arch = ArchName(name)
    kind = AttentionKind(attention)
    layers = _LAYOUTS[arch](kind is not AttentionKind.NONE)
    return ArchSpec(arch, kind, layers, strand_ratio=strand_ratio, filter_ratio=filter_ratio)


def _size(side: int) -> str:
    return f"{side}×{side}"


def _attention_rows(spec: ArchSpec, channels: int) -> list[str]:
    if spec.attention is AttentionKind.SE:
        return [f"fc, [{se_hidden_width(channels)}, {channels}]"]
    filters, length = clocal_shape_rule(channels, spec.filter_ratio, spec.strand_ratio)
    return [f"conv, 2×1, {filters}", f"conv, {length}×1, 1"]


def layer_rows(spec: ArchSpec) -> list[tuple[str, str]]:
    """
    Table rows as (output size, description) pairs, in the layer-table style.

    The pooling and classifier rows at the end merge into one line.
    """
    rows: list[tuple[str, str]] = []
    head: list[str] = []
    for record in spec.layers:
        parts: list[str] = []
        match record.kind:
            case LayerKind.CONV | LayerKind.HEAD_CONV:
                parts.append(f"conv, {record.kernel}×{record.kernel}, {record.channels}")
                if record.stride != 1:
                    parts.append(f"strides {record.stride}")
            case LayerKind.BOTTLENECK:
                mid = record.mid_channels
                parts += [f"conv, 1×1, {mid}", f"conv, 3×3, {mid}", f"conv, 1×1, {record.channels}"]
            case LayerKind.MAXPOOL:
                parts.append("Max Pooling 2×2")
            case LayerKind.GAP:
                head.append("global average pool")
                continue
            case LayerKind.DENSE:
                head.append(f"{record.channels}-d fc")
                continue
        if record.attention:
            parts += _attention_rows(spec, record.channels)
        rows.append((_size(record.output_size), " / ".join(parts)))
    rows.append((_size(1), ", ".join(head + ["softmax"])))
    return rows
