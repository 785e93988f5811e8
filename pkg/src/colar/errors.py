"""Exception types shared across the package."""


class ColarError(Exception):
    """Base class for every error raised by colar."""


class DimensionError(ColarError, ValueError):
    """Array shapes do not line up."""


class ParameterError(ColarError, ValueError):
    """An argument is outside its allowed range."""


class FormatError(ColarError):
    """A file on disk does not follow its binary or JSON layout."""


class ValidationError(ColarError, ValueError):
    """Content is well-formed but semantically inconsistent."""


class DataError(ColarError):
    """The data cannot support the requested operation."""


class NumericError(ColarError, ArithmeticError):
    """A computation produced a non-finite value."""


class UndefinedMetricError(ColarError, ValueError):
    """A metric is undefined for the given input (e.g. no positives)."""
