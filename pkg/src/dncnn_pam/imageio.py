"""8-bit grayscale image files: PNG (through Pillow) and binary PGM/PPM.

Images are 2-D ``uint8`` arrays, row-major ``(height, width)``. Color inputs
are reduced to luma on load.
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from dncnn_pam.errors import FormatError, ShapeError, TruncatedError, UnsupportedFormatError
from dncnn_pam.fileio import atomic_write_bytes

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")


def check_gray8(img: np.ndarray, name: str = "image") -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.ndim != 2 or img.dtype != np.uint8:
        raise ShapeError(f"{name} must be a 2-D uint8 array, got {getattr(img, 'dtype', type(img))} {getattr(img, 'shape', '')}")
    if min(img.shape) < 1:
        raise ShapeError(f"{name} is empty: {img.shape}")
    return img


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luma ``round(0.299 R + 0.587 G + 0.114 B)`` of an (h, w, 3) uint8 array, halves rounded up."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] < 3 or rgb.dtype != np.uint8:
        raise ShapeError(f"expected (h, w, 3) uint8 RGB, got {rgb.dtype} {rgb.shape}")
    r, g, b = (rgb[..., i].astype(np.int32) for i in range(3))
    # exact integer form of the weighted sum, +500 for round-half-up
    return ((299 * r + 587 * g + 114 * b + 500) // 1000).astype(np.uint8)


# -- netpbm ----------------------------------------------------------------------


def _pnm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` header integers after the magic; returns them and the offset of the raster."""
    pos, tokens = 2, []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise TruncatedError("netpbm header ended early") if pos >= len(data) else FormatError(
                f"bad netpbm header byte at offset {pos}"
            )
        tokens.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise TruncatedError("netpbm header is not followed by raster data")
    return tokens, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"only binary P5/P6 netpbm is supported, got {magic!r}")
    (w, h, maxval), start = _pnm_tokens(data, 3)
    if maxval != 255:
        raise UnsupportedFormatError(f"netpbm maxval {maxval} is not 8-bit (need 255)")
    if w < 1 or h < 1:
        raise FormatError(f"netpbm has empty size {w}x{h}")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    raster = data[start : start + need]
    if len(raster) < need:
        raise TruncatedError(f"netpbm raster truncated: {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(h, w).copy()
    return to_grayscale(arr.reshape(h, w, 3))


def encode_pgm(img: np.ndarray) -> bytes:
    check_gray8(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


# -- PNG -------------------------------------------------------------------------


def decode_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise UnsupportedFormatError(f"PNG is {mode} (more than 8 bits per sample)")
            if mode == "1":
                return np.asarray(im.convert("L"), dtype=np.uint8).copy()
            if mode == "L":
                return np.asarray(im, dtype=np.uint8).copy()
            if mode == "LA":
                return np.asarray(im, dtype=np.uint8)[..., 0].copy()
            if mode in ("P", "PA"):
                im = im.convert("RGBA" if "transparency" in im.info or mode == "PA" else "RGB")
            elif mode not in ("RGB", "RGBA"):
                raise UnsupportedFormatError(f"unsupported PNG mode {mode}")
            return to_grayscale(np.asarray(im, dtype=np.uint8))
    except UnsupportedFormatError:
        raise
    except (OSError, SyntaxError, ValueError, UnidentifiedImageError) as exc:
        if "truncated" in str(exc).lower():
            raise TruncatedError(f"PNG is truncated: {exc}") from exc
        raise FormatError(f"PNG could not be decoded: {exc}") from exc


def encode_png(img: np.ndarray) -> bytes:
    check_gray8(img)
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img), mode="L").save(buf, format="PNG")
    return buf.getvalue()


# -- dispatch ----------------------------------------------------------------------


def decode_image(data: bytes, name: str = "<bytes>") -> np.ndarray:
    try:
        if data[:8] == b"\x89PNG\r\n\x1a\n":
            return decode_png(data)
        if data[:1] == b"P" and data[1:2].isdigit():
            return decode_pnm(data)
    except FormatError as exc:
        raise type(exc)(f"{name}: {exc}") from exc
    raise UnsupportedFormatError(f"{name}: not a PNG or binary PGM/PPM file")


def load_image(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    if not data:
        raise TruncatedError(f"{path}: file is empty")
    return decode_image(data, str(path))


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write a PNG, or PGM when the suffix is .pgm/.pnm. The write is atomic."""
    path = Path(path)
    data = encode_pgm(img) if path.suffix.lower() in (".pgm", ".pnm") else encode_png(img)
    atomic_write_bytes(path, data)


def list_images(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    return sorted(
        p for p in directory.iterdir() if p.is_file() and not p.name.startswith(".") and p.suffix.lower() in IMAGE_SUFFIXES
    )
