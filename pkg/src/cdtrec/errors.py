"""Exception types shared across the package."""


class CdtrecError(Exception):
    """Base class for all package errors."""


class ParseError(CdtrecError):
    """A data file could not be parsed; message carries file and line number."""


class ValidationError(CdtrecError):
    """Input data violates a structural invariant."""


class ConfigError(CdtrecError):
    """A configuration value is out of its legal range."""


class SamplingError(CdtrecError):
    """Not enough candidates to draw the requested sample."""


class DivergenceError(CdtrecError):
    """An iterative solver or trainer produced a non-finite value."""
