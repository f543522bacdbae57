"""Exception hierarchy shared by all modules.

The CLI maps each family to its own exit code.
"""


class D2FTError(Exception):
    """Base class for all package errors."""


class ConfigError(D2FTError, ValueError):
    """Invalid model, budget or run configuration."""


class InputError(D2FTError, ValueError):
    """Malformed or inconsistent inputs (dimensions, missing files, bounds)."""


class DimensionError(InputError):
    """Array shape does not match what the model expects."""


class SizeError(InputError):
    """Problem too large for an exhaustive routine."""


class SchemaError(InputError):
    """A serialized document does not match the expected schema."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class NumericError(D2FTError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class StateError(D2FTError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward without cache)."""
