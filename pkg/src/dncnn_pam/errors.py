"""Exception hierarchy.

Everything raised on purpose derives from :class:`DncnnError`. The CLI maps
:class:`FormatError` (and :class:`DataError`) to exit code 2.
"""


class DncnnError(Exception):
    pass


class ShapeError(DncnnError, ValueError):
    """Tensor or image shapes do not line up."""


class DataError(DncnnError):
    """Input data is missing, empty or unusable."""


class FormatError(DataError):
    """A file could not be decoded."""


class MagicError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class ArchitectureMismatchError(FormatError):
    pass
