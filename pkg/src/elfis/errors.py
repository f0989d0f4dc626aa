"""Exception taxonomy shared across the package."""


class ElfisError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ElfisError):
    """Array shapes or axes are incompatible with the requested operation."""


class UsageError(ElfisError):
    """An operation was invoked with arguments outside its contract."""


class NumericError(ElfisError):
    """A computation encountered or produced non-finite values."""


class ParseError(ElfisError):
    """A text artifact could not be parsed; message names the offending line."""


class DegenerateMatrixError(ElfisError):
    """A dissimilarity matrix has zero off-diagonal variance and cannot be standardized."""


class UnsupportedModeError(ElfisError):
    """A configuration combination is valid elsewhere but not here (e.g. median aggregation while training)."""


class StratificationError(ElfisError):
    """A class has too few samples to appear in every requested split."""


class StageError(ElfisError):
    """A pipeline stage is missing a required input artifact."""


class ConfigError(ElfisError):
    """A configuration file or value failed validation."""
