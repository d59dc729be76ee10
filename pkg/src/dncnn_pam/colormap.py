"""The "hot" false-color map: black -> red -> yellow -> white.

For gray level ``i`` and ``t = i / 255`` the channels are::

    red   = clip(8/3 * t,     0, 1)
    green = clip(8/3 * t - 1, 0, 1)
    blue  = clip(4 * t - 3,   0, 1)

each scaled by 255 and rounded half-up, giving a fixed 256-entry table.
Red saturates at gray 96, green at 191, blue at 255.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from dncnn_pam.fileio import atomic_write_bytes
from dncnn_pam.imageio import check_gray8


def hot_table() -> np.ndarray:
    t = np.arange(256) / 255.0
    rgb = np.stack(
        [
            np.clip(8.0 / 3.0 * t, 0, 1),
            np.clip(8.0 / 3.0 * t - 1, 0, 1),
            np.clip(4.0 * t - 3, 0, 1),
        ],
        axis=1,
    )
    return np.floor(rgb * 255 + 0.5).astype(np.uint8)


HOT = hot_table()


def apply_hot(img: np.ndarray) -> np.ndarray:
    """(h, w) uint8 gray -> (h, w, 3) uint8 RGB."""
    check_gray8(img)
    return HOT[img]


def save_rgb(rgb: np.ndarray, path) -> None:
    """24-bit PNG, or binary PPM for a .ppm suffix."""
    path = Path(path)
    h, w, _ = rgb.shape
    if path.suffix.lower() == ".ppm":
        data = f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()
    else:
        buf = io.BytesIO()
        Image.fromarray(np.ascontiguousarray(rgb), mode="RGB").save(buf, format="PNG")
        data = buf.getvalue()
    atomic_write_bytes(path, data)
