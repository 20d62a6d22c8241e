"""
Training and augmentation settings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from data.enums import (
    DEFAULT_ADAM_EPS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_DECAY,
    DEFAULT_DECAY_EVERY,
    DEFAULT_EPOCHS,
    DEFAULT_EVAL_BATCH_SIZE,
    DEFAULT_FILTER_RATIO,
    DEFAULT_FLIP_PROB,
    DEFAULT_L2,
    DEFAULT_LR,
    DEFAULT_MAX_SHIFT,
    DEFAULT_STRAND_RATIO,
    ArchName,
    AttentionKind,
    CifarLayout,
    FillMode,
    L2Scope,
)


@dataclass
class AugmentConfig:
    """Horizontal flip and integer shift augmentation."""

    flip_prob: float = DEFAULT_FLIP_PROB
    max_shift: int = DEFAULT_MAX_SHIFT
    fill: FillMode = FillMode.NEAREST
    enabled: bool = True

    def __post_init__(self) -> None:
        self.fill = FillMode(self.fill)
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0 <= self.max_shift < CifarLayout.SIDE:
            raise ValueError(f"max_shift must be in [0, {CifarLayout.SIDE}), got {self.max_shift}")

    @classmethod
    def disabled(cls) -> AugmentConfig:
        return cls(flip_prob=0.0, max_shift=0, enabled=False)


@dataclass
class TrainConfig:
    """
    Optimizer schedule, regularization and model selection for one training run.

    Learning rate is lr0 * decay ** (epoch // decay_every).
    """

    arch: ArchName = ArchName.PLANE
    attention: AttentionKind = AttentionKind.CLOCAL
    lr0: float = DEFAULT_LR
    decay: float = DEFAULT_DECAY
    decay_every: int = DEFAULT_DECAY_EVERY
    epochs: int = DEFAULT_EPOCHS
    l2: float = DEFAULT_L2
    l2_scope: L2Scope = L2Scope.CONV
    batch_size: int = DEFAULT_BATCH_SIZE
    eval_batch_size: int = DEFAULT_EVAL_BATCH_SIZE
    seed: int = 0
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    adam_eps: float = DEFAULT_ADAM_EPS
    strand_ratio: int = DEFAULT_STRAND_RATIO
    filter_ratio: int = DEFAULT_FILTER_RATIO
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        """Coerce enum fields and validate ranges."""
        self.arch = ArchName(self.arch)
        self.attention = AttentionKind(self.attention)
        self.l2_scope = L2Scope(self.l2_scope)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)

        for name in ("lr0", "decay", "decay_every", "batch_size", "eval_batch_size", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.decay > 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be non-negative, got {self.l2}")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must be in (0, 1), got {getattr(self, name)}")
        for name in ("strand_ratio", "filter_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> dict[str, Any]:
        return json.loads(self.to_json())

    def to_json(self) -> str:
        """Single-line JSON with sorted keys."""
        return json.dumps(asdict(self), sort_keys=True, default=str)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path: Path) -> None:
        """Save settings to file."""
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: Path) -> TrainConfig:
        """Load settings from file, falling back to defaults when absent."""
        if path.exists():
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_dict(json.load(f))
        return cls()
