"""Exception hierarchy shared by the pipeline.

The CLI maps each family to a distinct exit code (see ``sdband.cli``).
"""


class SdbandError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SdbandError, ValueError):
    """Invalid configuration value or violated precondition."""


class DataError(SdbandError, ValueError):
    """Input data violates a domain invariant."""


class NonFiniteSampleError(DataError):
    pass


class AnnotationRangeError(DataError):
    pass


class PlacementError(DataError):
    """Synthetic events cannot be placed without overlapping."""


class FormatError(DataError):
    """A file does not follow its documented binary/text layout."""


class HeaderError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ShapeError(SdbandError, ValueError):
    """Tensor or parameter shapes are incompatible."""


class BandMismatchError(DataError):
    """Model bands differ from the bands requested for the data."""


class PairingError(DataError):
    """Two evaluation reports do not cover the same windows."""
