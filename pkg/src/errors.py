"""
Exception hierarchy for the patchalign toolkit.

Every error carries the exit code the CLI maps it to.
"""

from typing import Optional


class PatchAlignError(Exception):
    """Base class for all toolkit failures"""
    exit_code = 1


class TensorFormatError(PatchAlignError):
    """Tensor container is malformed or inconsistent with its shape"""


class RecordFormatError(PatchAlignError):
    """A caption-pair record could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(PatchAlignError):
    """Arguments have incompatible dimensions"""


class NumericalError(PatchAlignError):
    """Zero norm, non-finite value or kernel overflow"""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss"""

    def __init__(self, step: int, message: str = "non-finite loss"):
        self.step = step
        super().__init__(f"step {step}: {message}")


class TapeError(PatchAlignError):
    """Misuse of a gradient tape"""


class SchemaError(PatchAlignError):
    """A command produced output that does not match its schema"""


class ConfigError(PatchAlignError):
    """Invalid configuration value or key"""
    exit_code = 2


class UsageError(PatchAlignError):
    """Invalid command-line usage"""
    exit_code = 2


def error_payload(error: Exception) -> dict:
    """JSON error object emitted by the CLI"""
    return {
        "error": {
            "type": type(error).__name__,
            "message": str(error),
        }
    }
