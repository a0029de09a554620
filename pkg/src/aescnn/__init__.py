"""Model B aesthetic-score CNNs from scratch, with ensembling, RSRL and attention maps."""

from .errors import (AescnnError, ConfigError, DataError, DegenerateStatisticsError, FormatError,
                     NumericError, ShapeError)

__version__ = "0.1.0"

__all__ = [
    "AescnnError", "ConfigError", "DataError", "DegenerateStatisticsError", "FormatError",
    "NumericError", "ShapeError", "__version__",
]
