class SrenError(Exception):
    """Base class for all package errors."""


class InvalidParameter(SrenError, ValueError):
    pass


class InvalidArgument(SrenError, ValueError):
    pass


class IdxFormatError(SrenError):
    """Raised for malformed IDX files; ``code`` distinguishes the failure."""

    code = "idx"


class MagicMismatch(IdxFormatError):
    code = "magic"


class TruncatedFile(IdxFormatError):
    code = "truncated"


class CountMismatch(IdxFormatError):
    code = "count"


class NumericalFailure(SrenError, FloatingPointError):
    pass


class ConfigError(SrenError, ValueError):
    pass


class MissingArtifact(SrenError, FileNotFoundError):
    pass
