"""
Per-epoch metrics and per-run summaries.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

from .enums import FileConstants


@dataclass(frozen=True)
class EpochMetrics:
    """
    One metrics CSV row.

    ``l2_penalty`` is the mean per-batch weight penalty; it is logged but not part
    of the CSV columns.
    """

    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    seconds: float
    l2_penalty: float = 0.0

    def __post_init__(self) -> None:
        for name in ("train_acc", "test_acc"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")

    def csv_row(self) -> list[str]:
        """Formatted values in ``FileConstants.METRICS_COLUMNS`` order."""
        return [
            str(self.epoch),
            f"{self.lr:.10g}",
            f"{self.train_loss:.6f}",
            f"{self.train_acc:.6f}",
            f"{self.test_loss:.6f}",
            f"{self.test_acc:.6f}",
            f"{self.seconds:.3f}",
        ]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class RunSummary:
    """Outcome of one seeded run in a repeated-run protocol."""

    seed: int
    best_test_acc: float
    best_epoch: int
    final_test_acc: float
    epochs: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


METRICS_HEADER = list(FileConstants.METRICS_COLUMNS)
