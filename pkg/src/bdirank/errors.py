"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: usage errors exit 1, data errors exit 2,
anything else exits 3.
"""

from __future__ import annotations


class BdirankError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3


class UsageError(BdirankError):
    """Bad invocation: unknown config key, invalid flag combination, etc."""

    exit_code = 1


class DataError(BdirankError):
    """Input data violates a documented contract."""

    exit_code = 2


class ParseError(DataError):
    """Malformed input file; carries a location when one is known."""

    def __init__(self, message: str, *, offset: int | None = None, line: int | None = None):
        loc = ""
        if offset is not None:
            loc = f" (byte offset {offset})"
        elif line is not None:
            loc = f" (line {line})"
        super().__init__(message + loc)
        self.offset = offset
        self.line = line


class TrainingError(DataError):
    """Model training failed (divergence, degenerate training set, ...)."""


class StaleCheckpointError(DataError):
    """A pipeline checkpoint exists but was produced under different inputs or config."""
