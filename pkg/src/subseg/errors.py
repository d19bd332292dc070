"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError (and parsing/format problems) -> 3, NumericError -> 4.
"""


class SubsegError(Exception):
    """Base class for all package errors."""


class DimensionError(SubsegError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(SubsegError, ValueError):
    """Invalid configuration value, unknown key, or bad override."""


class DataError(SubsegError, ValueError):
    """Dataset content violates a precondition (bad mask values, missing pairs, ...)."""


class FormatError(DataError):
    """A file (PGM/PPM, checkpoint) does not follow its declared binary format."""


class NumericError(SubsegError, RuntimeError):
    """Non-finite values or a failed numeric check (NaN loss, gradient check)."""
