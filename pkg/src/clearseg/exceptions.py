"""Exceptions for clearseg."""

from __future__ import annotations

from collections.abc import Sequence

__all__ = [
    "CheckpointError",
    "ClearsegError",
    "ConsistencyError",
    "DegenerateInputError",
    "DimensionError",
    "InputError",
    "LabelRangeError",
    "MissingKeyError",
    "NumericError",
    "ShapeMismatchError",
    "UndefinedMeanError",
    "UnsupportedLayoutError",
]


class ClearsegError(Exception):
    """Base class for all errors raised by clearseg.

    Attributes
    ----------
    error
        Short machine-readable error code.
    exit_code
        Process exit code used by the command-line interface.
    """

    error = "clearseg_error"
    exit_code = 1


class InputError(ClearsegError):
    """The caller supplied invalid input data or arguments."""

    error = "invalid_input"
    exit_code = 2


class DimensionError(InputError):
    """Tensor or image dimensions are incompatible with the operation."""

    error = "dimension_mismatch"


class LabelRangeError(InputError):
    """A label map contains a value outside the valid class range."""

    error = "label_out_of_range"

    def __init__(self, value: int, num_classes: int) -> None:
        super().__init__(
            f"Label value {value} is not below num_classes={num_classes}"
            " and is not the ignore index"
        )
        self.value = value
        self.num_classes = num_classes


class UndefinedMeanError(InputError):
    """No class contributed to the mean IoU."""

    error = "undefined_mean"


class CheckpointError(ClearsegError):
    """A checkpoint or embedding archive could not be used."""

    error = "invalid_checkpoint"
    exit_code = 3


class MissingKeyError(CheckpointError):
    """A required tensor is not present in the archive."""

    error = "missing_key"

    def __init__(self, key: str) -> None:
        super().__init__(f"Required tensor {key} not found in archive")
        self.key = key


class ShapeMismatchError(CheckpointError):
    """A tensor in the archive has an unexpected shape."""

    error = "shape_mismatch"

    def __init__(
        self, key: str, expected: Sequence[int], actual: Sequence[int]
    ) -> None:
        super().__init__(
            f"Tensor {key} has shape {tuple(actual)}, expected"
            f" {tuple(expected)}"
        )
        self.key = key
        self.expected = tuple(expected)
        self.actual = tuple(actual)


class ConsistencyError(CheckpointError):
    """Two parts of an archive disagree with each other."""

    error = "inconsistent_archive"


class UnsupportedLayoutError(CheckpointError):
    """The archive uses a layout that cannot be handled."""

    error = "unsupported_layout"


class NumericError(ClearsegError):
    """A computation produced or received non-finite values.

    Parameters
    ----------
    message
        Description of the problem.
    branch
        Name of the computation branch where the problem was detected.
    """

    error = "numeric_error"
    exit_code = 4

    def __init__(self, message: str, branch: str | None = None) -> None:
        if branch:
            message = f"{message} (in {branch})"
        super().__init__(message)
        self.branch = branch


class DegenerateInputError(NumericError):
    """Input is degenerate for the operation, such as a zero-norm row."""

    error = "degenerate_input"
