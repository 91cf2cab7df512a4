"""Exception hierarchy shared across segkit."""


class SegkitError(Exception):
    """Base class for all segkit errors."""


class ShapeError(SegkitError, ValueError):
    pass


class BoundsError(SegkitError, IndexError):
    pass


class EmptyContentError(SegkitError, ValueError):
    pass


class EncodingError(SegkitError, ValueError):
    pass


class ConfigError(SegkitError, ValueError):
    pass


class FormatError(SegkitError, ValueError):
    """Malformed or unsupported file content."""


class BadMagicError(FormatError):
    pass


class UnsupportedDatatypeError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class UnsupportedDimError(FormatError):
    pass


class ManifestError(SegkitError):
    pass


class EmptyDatasetError(ManifestError):
    pass


class DegenerateHistogramError(SegkitError, ValueError):
    pass


class NoTumorError(SegkitError):
    pass


class GraphError(SegkitError):
    """Raised when backward() is called on something that is not a scalar."""


class CheckpointError(SegkitError):
    pass


class UndefinedMetricWarning(UserWarning):
    """A ratio metric had a zero denominator; the value is reported as NaN."""


class DataError(SegkitError):
    """Input data is missing or unusable for the requested command."""
