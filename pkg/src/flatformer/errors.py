"""Exception types shared across the package.

Each class maps to a distinct CLI exit code (see :mod:`flatformer.cli`).
"""


class FlatFormerError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FlatFormerError, ValueError):
    """Invalid configuration, shape mismatch, or unknown option."""

    exit_code = 2


class DataError(FlatFormerError, ValueError):
    """Malformed or out-of-contract input data."""

    exit_code = 3


class DivergenceError(FlatFormerError, FloatingPointError):
    """Non-finite loss or gradient encountered during optimisation."""

    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
