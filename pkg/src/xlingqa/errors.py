"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: data/IO problems exit 1,
configuration problems exit 2, numeric failures exit 3.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed, missing, or mismatched data."""


class NumericError(ArithmeticError):
    """Non-finite or otherwise unusable numeric state."""


class CheckpointError(DataError):
    """Unreadable or incompatible checkpoint file."""
