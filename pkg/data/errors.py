"""
Exception hierarchy. Each family maps onto one command-line exit code.
"""

from __future__ import annotations

from .enums import ExitCode


class ChannelLocalError(Exception):
    """Base class for every error raised by this package."""

    exit_code: ExitCode = ExitCode.USAGE_ERROR


class ShapeError(ChannelLocalError, ValueError):
    """Raised when array shapes or dimensions violate an operation's precondition."""


class DatasetError(ChannelLocalError):
    """Raised when CIFAR files are missing or malformed."""

    exit_code = ExitCode.DATA_ERROR


class CheckpointError(ChannelLocalError):
    """Raised for bad magic, truncated files or fingerprint mismatches."""

    exit_code = ExitCode.DATA_ERROR


class GradcheckError(ChannelLocalError):
    """Raised when a finite-difference evaluation produces a non-finite value."""

    exit_code = ExitCode.GRADCHECK_FAILURE


class NonFiniteLossError(ChannelLocalError):
    """Raised when the training loss stops being finite."""

    exit_code = ExitCode.NON_FINITE_LOSS

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"Non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value
