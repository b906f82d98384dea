"""Exception hierarchy shared across the package."""


class MambaSLError(Exception):
    """Base class for all package errors."""


class TsParseError(MambaSLError):
    """Malformed `.ts` file. Carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(MambaSLError):
    """Dataset-level inconsistency (dimension mismatch, empty split, ...)."""


class SchemaError(MambaSLError):
    """Invalid run configuration document."""


class NumericError(MambaSLError):
    """Non-finite value produced during a forward/backward pass."""


class CheckpointError(MambaSLError):
    """Corrupt, truncated or incompatible checkpoint file."""
