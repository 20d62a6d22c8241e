#!/usr/bin/env python3
"""
Enums and constants for the channel-locality training stack.
Following Python 3.11 practice with StrEnum and IntEnum.
"""

from enum import StrEnum, IntEnum
from pathlib import Path
from typing import Final

import numpy as np


class ArchName(StrEnum):
    """Architectures available in the model zoo."""

    PLANE = "plane"
    ALLCNN = "allcnn"
    RESNET = "resnet"

    @property
    def display_name(self) -> str:
        """Get the display name for this architecture."""
        names = {
            self.PLANE: "Plane CNN",
            self.ALLCNN: "ALL-CNN",
            self.RESNET: "Modified ResNet",
        }
        return names[self]


class AttentionKind(StrEnum):
    """Channel attention attached after feature-extraction units."""

    NONE = "none"
    SE = "se"
    CLOCAL = "clocal"


class PaddingMode(StrEnum):
    """Convolution padding modes."""

    VALID = "valid"
    SAME = "same"


class NormMode(StrEnum):
    """Forward mode for layers with train/inference behaviour."""

    TRAIN = "train"
    INFER = "infer"


class ActivationKind(StrEnum):
    """Pointwise and row-wise activations."""

    RELU = "relu"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


class Precision(StrEnum):
    """Numeric precision modes."""

    STANDARD = "standard"  # 32-bit, training
    WIDE = "wide"  # 64-bit, gradient checks

    @property
    def dtype(self) -> np.dtype:
        """Get the NumPy dtype for this precision."""
        return np.dtype(np.float32) if self is Precision.STANDARD else np.dtype(np.float64)

    @classmethod
    def of(cls, array: np.ndarray) -> "Precision":
        """Classify an array by its dtype."""
        return cls.WIDE if array.dtype == np.float64 else cls.STANDARD


class FillMode(StrEnum):
    """Fill used for pixels vacated by a shift."""

    NEAREST = "nearest"
    ZERO = "zero"


class LayerKind(StrEnum):
    """Rows of an architecture layer table."""

    CONV = "conv"  # conv -> BN -> ReLU
    HEAD_CONV = "head_conv"  # 1x1 class conv, no BN, no ReLU
    MAXPOOL = "maxpool"
    BOTTLENECK = "bottleneck"
    GAP = "gap"
    DENSE = "dense"


class ParamRole(StrEnum):
    """What a learnable tensor is, used to scope weight decay."""

    CONV_WEIGHT = "conv_weight"
    CONV_BIAS = "conv_bias"
    BN_GAMMA = "bn_gamma"
    BN_BETA = "bn_beta"
    DENSE_WEIGHT = "dense_weight"
    DENSE_BIAS = "dense_bias"
    ATTENTION_WEIGHT = "attention_weight"
    ATTENTION_BIAS = "attention_bias"


class L2Scope(StrEnum):
    """Which weights receive the L2 penalty."""

    CONV = "conv"
    CONV_DENSE = "conv_dense"
    ALL = "all"

    @property
    def roles(self) -> frozenset[ParamRole]:
        """Get the parameter roles penalised under this scope."""
        scopes = {
            self.CONV: frozenset({ParamRole.CONV_WEIGHT}),
            self.CONV_DENSE: frozenset({ParamRole.CONV_WEIGHT, ParamRole.DENSE_WEIGHT}),
            self.ALL: frozenset(
                {ParamRole.CONV_WEIGHT, ParamRole.DENSE_WEIGHT, ParamRole.ATTENTION_WEIGHT}
            ),
        }
        return scopes[self]


class ExitCode(IntEnum):
    """Process exit codes for the command line."""

    SUCCESS = 0
    USAGE_ERROR = 1
    DATA_ERROR = 2
    GRADCHECK_FAILURE = 3
    NON_FINITE_LOSS = 4
    INTERRUPTED = 130


class CifarLayout(IntEnum):
    """CIFAR-10 binary record layout."""

    CLASSES = 10
    CHANNELS = 3
    SIDE = 32
    PIXELS = 3072
    RECORD_SIZE = 3073
    RECORDS_PER_FILE = 10000


class FileConstants:
    """File names and formats using pathlib."""

    TRAIN_FILES: Final[tuple[str, ...]] = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
    TEST_FILE: Final[str] = "test_batch.bin"

    METRICS_FILE: Final[str] = "metrics.csv"
    SUMMARY_FILE: Final[str] = "summary.csv"
    CONFIG_FILE: Final[str] = "config.json"
    BEST_CHECKPOINT: Final[str] = "best.ckpt"
    LAST_CHECKPOINT: Final[str] = "last.ckpt"
    BACKUP_SUFFIX: Final[str] = ".backup"
    DEFAULT_OUT_DIR: Final[Path] = Path("runs")

    CHECKPOINT_MAGIC: Final[bytes] = b"CLKB"
    CHECKPOINT_VERSION: Final[int] = 1
    ARCH_RECORD: Final[str] = "meta.arch"

    METRICS_COLUMNS: Final[tuple[str, ...]] = (
        "epoch",
        "lr",
        "train_loss",
        "train_acc",
        "test_loss",
        "test_acc",
        "seconds",
    )


THREADS_ENV_VAR: Final[str] = "CHANLOC_THREADS"

# Defaults for training and augmentation
DEFAULT_LR: Final[float] = 0.01
DEFAULT_DECAY: Final[float] = 0.94
DEFAULT_DECAY_EVERY: Final[int] = 2
DEFAULT_EPOCHS: Final[int] = 150
DEFAULT_L2: Final[float] = 1e-4
DEFAULT_BATCH_SIZE: Final[int] = 128
DEFAULT_EVAL_BATCH_SIZE: Final[int] = 500
DEFAULT_BETA1: Final[float] = 0.9
DEFAULT_BETA2: Final[float] = 0.999
DEFAULT_ADAM_EPS: Final[float] = 1e-8
DEFAULT_FLIP_PROB: Final[float] = 0.5
DEFAULT_SHIFT_FRACTION: Final[float] = 0.2
DEFAULT_MAX_SHIFT: Final[int] = round(DEFAULT_SHIFT_FRACTION * CifarLayout.SIDE)

# Block shape rules
DEFAULT_FILTER_RATIO: Final[int] = 4  # F = C / 4
DEFAULT_STRAND_RATIO: Final[int] = 8  # L = C / 8, table rule
PROSE_STRAND_RATIO: Final[int] = 4  # L = C / 4, text rule
SE_REDUCTION: Final[int] = 8  # hidden width C / 8

# Batch normalization
BN_EPSILON: Final[float] = 1e-5
BN_MOMENTUM: Final[float] = 0.99

# Gradient checking
GRADCHECK_STEP: Final[float] = 1e-5
GRADCHECK_TOLERANCE: Final[float] = 1e-6
PRECISION_AGREEMENT_TOLERANCE: Final[float] = 1e-3
KINK_MARGIN: Final[float] = 1e-3
GRADCHECK_SEEDS: Final[int] = 5
