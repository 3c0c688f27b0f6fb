"""Exception types shared across the package."""
from __future__ import annotations


class AdbcrError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AdbcrError):
    """Operand shapes are incompatible."""


class DomainError(AdbcrError):
    """An input lies outside an operation's domain (empty vectors, bad values)."""


class ConfigError(AdbcrError):
    """A configuration value violates its invariant."""


class BatchCompositionError(AdbcrError):
    """A batch lacks the rows an objective needs (missing arm, empty pool)."""


class DatasetError(AdbcrError):
    """A dataset violates a structural precondition (missing split, tiny arm)."""


class TrainingError(AdbcrError):
    """Training produced a non-finite quantity; the run is unusable."""


class CheckpointError(AdbcrError):
    """A checkpoint file is unreadable, truncated, or of an unknown format."""


class SearchError(AdbcrError):
    """A hyper-parameter search produced no usable run."""


class ParseError(AdbcrError):
    """A data file failed to parse; carries the offending location when known."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column!r}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column
