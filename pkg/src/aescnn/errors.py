"""Exception hierarchy shared by every module.

The CLI maps each family to its own exit code, so raise the most specific
class that applies.
"""


class AescnnError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AescnnError, ValueError):
    """Invalid run configuration, model variant or hyperparameter."""


class DataError(AescnnError, ValueError):
    """Malformed or missing input data (labels, images, probability files)."""


class FormatError(DataError):
    """Unreadable checkpoint or trace payload."""


class ShapeError(AescnnError, ValueError):
    """Array extents do not satisfy an operator's preconditions."""


class NumericError(AescnnError, ArithmeticError):
    """Non-finite values or degenerate statistics."""


class DegenerateStatisticsError(NumericError):
    """Batch statistics cannot be formed (a single element per channel)."""
