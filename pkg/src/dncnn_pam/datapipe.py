"""Preprocessing, augmentation, synthetic noise and patch extraction.

The training corpus goes: grayscale -> 256x256 bilinear resize -> four
rotations per image -> square patches -> packed container (see
:mod:`dncnn_pam.container`). Noisy inputs are the clean pixels plus white
Gaussian noise, clamped and rounded back to 8 bits.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from dncnn_pam.errors import ShapeError
from dncnn_pam.imageio import check_gray8

TARGET_SIZE = 256
ROTATION_TAGS = ("r0", "r90", "r180", "r270")


def round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5)


def resize_bilinear(img: np.ndarray, out_w: int = TARGET_SIZE, out_h: int = TARGET_SIZE) -> np.ndarray:
    """Bilinear resize with pixel-center alignment (sample at ``(i + 0.5) * scale - 0.5``).

    Sample coordinates are clamped to the source grid, so borders replicate
    and no output value leaves the source range.
    """
    check_gray8(img)
    h, w = img.shape
    if h < 2 or w < 2:
        raise ShapeError(f"cannot resize a degenerate {w}x{h} image (need at least 2x2)")
    if out_w < 1 or out_h < 1:
        raise ShapeError(f"output size must be positive, got {out_w}x{out_h}")

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
        return lo, pos - lo

    y0, fy = axis(h, out_h)
    x0, fx = axis(w, out_w)
    src = img.astype(np.float64)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x0 + 1] * fx
    bot = src[y0 + 1][:, x0] * (1 - fx) + src[y0 + 1][:, x0 + 1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return np.clip(round_half_up(out), 0, 255).astype(np.uint8)


def rotate(img: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Counter-clockwise rotation by ``90 * quarter_turns`` degrees (pure index permutation)."""
    check_gray8(img)
    return np.ascontiguousarray(np.rot90(img, k=quarter_turns % 4))


def augment_dataset(images: list[np.ndarray]) -> list[tuple[np.ndarray, str]]:
    """Each image followed by its 90/180/270 degree rotations, tagged r0..r270."""
    out = []
    for img in images:
        for k, tag in enumerate(ROTATION_TAGS):
            out.append((rotate(img, k), tag))
    return out


def patch_origins(length: int, size: int, stride: int) -> list[int]:
    """Window starts along one axis; a last window is anchored to the far edge if needed."""
    if size > length:
        raise ShapeError(f"patch size {size} exceeds image side {length}")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] != length - size:
        starts.append(length - size)
    return starts


def extract_patches(img: np.ndarray, size: int = 64, stride: int = 32) -> list[np.ndarray]:
    check_gray8(img)
    h, w = img.shape
    ys = patch_origins(h, size, stride)
    xs = patch_origins(w, size, stride)
    return [img[y : y + size, x : x + size].copy() for y in ys for x in xs]


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 25.0
    seed: int = 0
    kind: str = "awgn"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.kind != "awgn":
            raise ValueError(f"unsupported noise kind {self.kind!r}")


def derive_seed(*parts: int) -> np.random.SeedSequence:
    """Independent stream for an item, e.g. ``derive_seed(run_seed, epoch, index)``."""
    return np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])


def name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def noisy_pixels(clean: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``clean + N(0, sigma^2)`` clamped to [0, 255] and rounded; works on any uint8 array."""
    noise = rng.standard_normal(clean.shape) * sigma
    return np.clip(round_half_up(clean.astype(np.float64) + noise), 0, 255).astype(np.uint8)


def add_noise(img: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    check_gray8(img)
    if spec.sigma == 0:
        return img.copy()
    return noisy_pixels(img, spec.sigma, np.random.default_rng(spec.seed))
