"""Packed training-patch corpus ("PAD1").

Layout, all little-endian::

    b"PAD1"
    u32 version, u32 count, u32 patch_h, u32 patch_w
    count * patch_h * patch_w bytes of uint8 patches, row-major
    u32 manifest length, then that many bytes of UTF-8 JSON:
        [[source_filename, augmentation_tag], ...]   # one entry per patch
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from dncnn_pam.datapipe import ROTATION_TAGS
from dncnn_pam.errors import ChecksumError, FormatError, MagicError, ShapeError, TruncatedError
from dncnn_pam.fileio import atomic_write_bytes

MAGIC = b"PAD1"
VERSION = 1
_HEADER = struct.Struct("<4s4I")
_U32 = struct.Struct("<I")


@dataclass
class DatasetContainer:
    patches: np.ndarray  # (count, patch_h, patch_w) uint8
    manifest: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        p = self.patches
        if p.ndim != 3 or p.dtype != np.uint8:
            raise ShapeError(f"patches must be a (count, h, w) uint8 array, got {p.dtype} {p.shape}")
        if len(self.manifest) != p.shape[0]:
            raise ShapeError(f"manifest has {len(self.manifest)} entries for {p.shape[0]} patches")
        for src, tag in self.manifest:
            if tag not in ROTATION_TAGS:
                raise ValueError(f"augmentation tag {tag!r} not in {ROTATION_TAGS}")

    @property
    def count(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_shape(self) -> tuple[int, int]:
        return self.patches.shape[1], self.patches.shape[2]

    def __eq__(self, other):
        if not isinstance(other, DatasetContainer):
            return NotImplemented
        return (
            self.patches.shape == other.patches.shape
            and np.array_equal(self.patches, other.patches)
            and [tuple(e) for e in self.manifest] == [tuple(e) for e in other.manifest]
        )


def from_patches(patches: list[np.ndarray], manifest: list[tuple[str, str]], patch_shape=(0, 0)) -> DatasetContainer:
    """Stack equally sized patches; ``patch_shape`` only matters for an empty list."""
    if patches:
        shapes = {p.shape for p in patches}
        if len(shapes) != 1:
            raise ShapeError(f"patches differ in size: {sorted(shapes)}")
        arr = np.stack(patches).astype(np.uint8, copy=False)
    else:
        arr = np.zeros((0, *patch_shape), dtype=np.uint8)
    return DatasetContainer(arr, [(str(s), str(t)) for s, t in manifest])


def encode_dataset(ds: DatasetContainer) -> bytes:
    ph, pw = ds.patch_shape
    manifest = json.dumps([list(e) for e in ds.manifest], ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        [
            _HEADER.pack(MAGIC, VERSION, ds.count, ph, pw),
            np.ascontiguousarray(ds.patches).tobytes(),
            _U32.pack(len(manifest)),
            manifest,
        ]
    )
    return body + _U32.pack(zlib.crc32(body))


def decode_dataset(data: bytes) -> DatasetContainer:
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicError(f"not a PAD1 dataset container (magic {data[:4]!r})")
    if len(data) < _HEADER.size + 2 * _U32.size:
        raise TruncatedError(f"container truncated: {len(data)} bytes")
    _, version, count, ph, pw = _HEADER.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    payload = count * ph * pw
    mpos = _HEADER.size + payload
    if len(data) < mpos + 2 * _U32.size:
        raise TruncatedError(f"container truncated inside the patch payload ({len(data)} bytes, need > {mpos})")
    (mlen,) = _U32.unpack_from(data, mpos)
    end = mpos + _U32.size + mlen
    if len(data) < end + _U32.size:
        raise TruncatedError("container truncated inside the manifest")
    if len(data) > end + _U32.size:
        raise FormatError(f"{len(data) - end - _U32.size} trailing bytes after the container checksum")
    (crc,) = _U32.unpack_from(data, end)
    if zlib.crc32(data[:end]) != crc:
        raise ChecksumError("container CRC-32 mismatch")
    try:
        manifest = [tuple(e) for e in json.loads(data[mpos + _U32.size : end].decode("utf-8"))]
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"container manifest is not valid UTF-8 JSON: {exc}") from exc
    patches = np.frombuffer(data, dtype=np.uint8, count=payload, offset=_HEADER.size).reshape(count, ph, pw)
    try:
        return DatasetContainer(patches.copy(), manifest)
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"container contents are inconsistent: {exc}") from exc


def pack_dataset(path, ds: DatasetContainer) -> None:
    atomic_write_bytes(path, encode_dataset(ds))


def load_dataset(path) -> DatasetContainer:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_dataset(data)
