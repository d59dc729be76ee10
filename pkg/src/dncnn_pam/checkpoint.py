"""On-disk model snapshots ("DNC1").

Layout, all little-endian::

    b"DNC1"
    u32 version, u32 depth, u32 width, u32 in_channels, u32 epoch
    per layer, in stack order, raw float32:
        conv weight (c_out, c_in, 3, 3), conv bias (c_out)
        [gamma, beta, running_mean, running_var]   # middle layers only
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from dncnn_pam.errors import ArchitectureMismatchError, ChecksumError, FormatError, MagicError, TruncatedError
from dncnn_pam.fileio import atomic_write_bytes
from dncnn_pam.model import DnCNNModel, Layer, layer_shapes
from dncnn_pam.tensor_core import KERNEL, BatchNormParams, ConvParams

MAGIC = b"DNC1"
VERSION = 1
_HEADER = struct.Struct("<4s5I")
_CRC = struct.Struct("<I")
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: DnCNNModel
    epoch: int


def _expected_floats(depth: int, width: int, in_channels: int) -> int:
    total = 0
    for c_in, c_out, has_bn in layer_shapes(depth, width, in_channels):
        total += c_out * c_in * KERNEL * KERNEL + c_out
        if has_bn:
            total += 4 * c_out
    return total


def encode_checkpoint(model: DnCNNModel, epoch: int) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, model.depth, model.width, model.in_channels, epoch)]
    parts += [np.ascontiguousarray(a, dtype=_F32).tobytes() for a in model.state_arrays()]
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def decode_checkpoint(
    data: bytes, expect_depth: int | None = None, expect_width: int | None = None
) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicError(f"not a DNC1 checkpoint (magic {data[:4]!r})")
    if len(data) < _HEADER.size + _CRC.size:
        raise TruncatedError(f"checkpoint truncated: {len(data)} bytes")
    body, (crc,) = data[: -_CRC.size], _CRC.unpack(data[-_CRC.size :])
    _, version, depth, width, in_channels, epoch = _HEADER.unpack_from(body)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if depth < 3 or width < 1 or in_channels < 1:
        raise ArchitectureMismatchError(
            f"checkpoint header is inconsistent: depth={depth} width={width} in_channels={in_channels}"
        )
    need = _HEADER.size + 4 * _expected_floats(depth, width, in_channels)
    if len(body) < need:
        raise TruncatedError(f"checkpoint truncated: {len(body)} of {need} payload bytes")
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC-32 mismatch")
    if len(body) != need:
        raise ArchitectureMismatchError(
            f"checkpoint holds {len(body) - _HEADER.size} payload bytes, "
            f"depth={depth} width={width} needs {need - _HEADER.size}"
        )
    if expect_depth is not None and expect_depth != depth:
        raise ArchitectureMismatchError(f"checkpoint depth {depth} != requested {expect_depth}")
    if expect_width is not None and expect_width != width:
        raise ArchitectureMismatchError(f"checkpoint width {width} != requested {expect_width}")

    flat = np.frombuffer(body, dtype=_F32, offset=_HEADER.size)
    pos = 0

    def take(*shape):
        nonlocal pos
        size = int(np.prod(shape))
        arr = flat[pos : pos + size].reshape(shape).astype(np.float32)
        pos += size
        return arr

    layers = []
    try:
        for i, (c_in, c_out, has_bn) in enumerate(layer_shapes(depth, width, in_channels)):
            conv = ConvParams(take(c_out, c_in, KERNEL, KERNEL), take(c_out))
            bn = None
            if has_bn:
                bn = BatchNormParams(take(c_out), take(c_out), take(c_out), take(c_out))
                if not all(np.all(np.isfinite(a)) for a in (bn.gamma, bn.beta, bn.running_mean, bn.running_var)):
                    raise ValueError("non-finite batch norm values")
            layers.append(Layer(conv, bn, relu=i < depth - 1))
    except ValueError as exc:
        raise FormatError(f"checkpoint layer {len(layers) + 1} is invalid: {exc}") from exc
    model = DnCNNModel(depth, width, in_channels, layers)
    return Checkpoint(model, epoch)


def save_checkpoint(path, model: DnCNNModel, epoch: int) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, epoch))


def load_checkpoint(path, expect_depth: int | None = None, expect_width: int | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_checkpoint(data, expect_depth, expect_width)
