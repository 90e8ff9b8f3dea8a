"""Exception types shared across the package."""


class GLMError(Exception):
    """Base class for all package errors."""


class DimensionError(GLMError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(GLMError, ValueError):
    """A row that must carry positive mass is all zeros."""


class ContractError(GLMError, ValueError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(GLMError, FloatingPointError):
    """A forward value or a parameter became NaN or infinite."""


class DatasetFormatError(GLMError, ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InvariantError(GLMError, ValueError):
    """A parsed or generated sample violates a data invariant."""


class CheckpointVersionError(GLMError):
    """Checkpoint written with an unsupported format version."""


class CheckpointCorruptError(GLMError):
    """Checkpoint failed magic, length or checksum validation."""
