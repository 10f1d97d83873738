"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific subclass it can.
"""


class EgospanError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EgospanError):
    """Bad configuration: unknown keys, malformed values, invalid arguments."""


class DataError(EgospanError):
    """Missing or malformed input data (files, datasets, weight payloads)."""


class ParseError(DataError):
    """Structured text could not be parsed.

    Carries the 1-based line number when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(EgospanError):
    """Numerical failure: divergence, non-finite values, singular geometry."""


class NotCalibratedError(EgospanError):
    """An operation needed height calibration that was never provided."""
