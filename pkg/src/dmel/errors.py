"""Exception hierarchy shared across the toolkit."""


class DmelError(Exception):
    """Base class for all toolkit errors."""


class DataError(DmelError, ValueError):
    """Input data or an on-disk file is unusable."""


class FormatError(DataError):
    pass


class UnsupportedCodecError(DataError):
    pass


class TruncationError(FormatError):
    pass


class CorruptionError(FormatError):
    pass


class SchemaError(FormatError):
    pass


class VersionError(FormatError):
    pass


class EmptyCorpusError(DataError):
    pass


class DegenerateCorpusError(DataError):
    pass


class ConfigurationError(DmelError, ValueError):
    pass


class CapacityError(DmelError, ValueError):
    """Sequence longer than the model's positional capacity."""


class DivergenceError(DmelError, RuntimeError):
    """Training produced a non-finite loss."""
