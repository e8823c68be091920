"""Exception classes shared across the package.

The CLI maps these onto distinct exit codes (config=2, data=3, numerical=4).
"""


class PheError(Exception):
    """Base class for package errors."""


class ConfigError(PheError):
    """Invalid or inconsistent experiment configuration."""


class DataError(PheError):
    """Dataset could not be read or does not match its schema."""


class NumericalError(PheError):
    """Optimization produced a non-finite or divergent state."""
