"""Residual denoising CNN (DnCNN) for grayscale microscopy images, in plain numpy."""

from dncnn_pam.errors import (
    ArchitectureMismatchError,
    ChecksumError,
    DataError,
    DncnnError,
    FormatError,
    MagicError,
    ShapeError,
    TruncatedError,
)

__version__ = "0.1.0"

__all__ = [
    "ArchitectureMismatchError",
    "ChecksumError",
    "DataError",
    "DncnnError",
    "FormatError",
    "MagicError",
    "ShapeError",
    "TruncatedError",
    "__version__",
]
