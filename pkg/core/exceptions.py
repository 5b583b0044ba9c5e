"""
Exception hierarchy for airsum.

Every error raised on purpose by the package derives from AirsumError so the
command-line front end can map failures to exit codes in one place.
"""

from typing import Any


class AirsumError(Exception):
    """Base class for all airsum errors."""


class ConfigError(AirsumError):
    """Invalid process settings or experiment configuration."""


class ShapeError(AirsumError, ValueError):
    """Tensor extents do not match what an operation requires."""


class NumericError(AirsumError, ArithmeticError):
    """A computation produced NaN/Inf or received invalid numeric input."""


class TapeError(AirsumError):
    """Gradient requested for a loss that is not recorded on the tape."""


class CodewordIndexError(AirsumError, IndexError):
    """A quantiser index lies outside the codebook."""


class EmptySlotError(AirsumError):
    """An aggregation rule received an activity vector with no counts."""


class PartitionError(AirsumError):
    """Data cannot be partitioned across the requested devices."""


class DivergenceError(NumericError):
    """
    A federated run diverged.

    Attributes:
        metrics: The per-round metrics collected before the failure.
    """

    def __init__(self, message: str, metrics: list[Any] | None = None) -> None:
        super().__init__(message)
        self.metrics = metrics or []


class TrainingAborted(NumericError):
    """
    Decoder training hit a non-finite loss.

    Attributes:
        checkpoint: The last good checkpoint, if one exists.
    """

    def __init__(self, message: str, checkpoint: Any = None) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint


class ContainerError(AirsumError):
    """Base class for binary container problems."""


class ContainerCorruptError(ContainerError):
    """The container is truncated, has a bad header or fails its checksum."""


class ContainerVersionError(ContainerError):
    """The container was written by an incompatible format version."""
