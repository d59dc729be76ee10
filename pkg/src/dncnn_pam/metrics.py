"""PSNR / SSIM on 8-bit images, the median-filter baseline, and report records."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dncnn_pam.errors import ShapeError
from dncnn_pam.imageio import check_gray8

PEAK = 255.0
PSNR_MAX = math.inf  # identical images
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a: np.ndarray, b: np.ndarray) -> None:
    check_gray8(a, "first image")
    check_gray8(b, "second image")
    if a.shape != b.shape:
        raise ShapeError(f"image sizes differ: {a.shape[::-1]} vs {b.shape[::-1]}")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    _pair(a, b)
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """``10 log10(255^2 / MSE)`` in dB; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0:
        return PSNR_MAX
    return 10.0 * math.log10(PEAK * PEAK / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully covered windows."""
    k = g.size
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[::-1]}")
    g = gaussian_window()
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    luminance = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    contrast_structure = (2 * sxy + c2) / (sxx + syy + c2)
    return luminance, contrast_structure


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lum, cs = _ssim_terms(a, b)
    return lum * cs


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all 11x11 Gaussian (sd 1.5) windows that fit inside the image."""
    return float(np.mean(ssim_map(a, b)))


def contrast_structure(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of the contrast-structure factor of SSIM (the part blind to mean luminance)."""
    return float(np.mean(_ssim_terms(a, b)[1]))


def median_filter(img: np.ndarray, k: int = 3) -> np.ndarray:
    """k x k median with replicated borders."""
    check_gray8(img)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median window must be a positive odd size, got {k}")
    if k > min(img.shape):
        raise ShapeError(f"median window {k} larger than image {img.shape[::-1]}")
    r = k // 2
    padded = np.pad(img, r, mode="edge")
    windows = sliding_window_view(padded, (k, k)).reshape(*img.shape, k * k)
    return np.median(windows, axis=-1).astype(np.uint8)


@dataclass
class QualityReport:
    psnr_db: float
    ssim: float
    elapsed: float | None = None


@dataclass
class PairEvaluation:
    noisy: QualityReport
    denoised: QualityReport

    @property
    def gain_db(self) -> float:
        return psnr_gain(self.noisy.psnr_db, self.denoised.psnr_db)


def psnr_gain(noisy_db: float, denoised_db: float) -> float:
    if math.isinf(denoised_db) and math.isinf(noisy_db):
        return 0.0
    return denoised_db - noisy_db


def evaluate_pair(clean, noisy, denoised, elapsed: float | None = None) -> PairEvaluation:
    return PairEvaluation(
        noisy=QualityReport(psnr(noisy, clean), ssim(noisy, clean)),
        denoised=QualityReport(psnr(denoised, clean), ssim(denoised, clean), elapsed),
    )


# -- records ---------------------------------------------------------------------

RECORD_FIELDS = ("filename", "psnr_noisy", "psnr_denoised", "ssim_noisy", "ssim_denoised", "elapsed_seconds")


def fmt_db(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def records_csv(rows: list[tuple[str, PairEvaluation]]) -> str:
    """Comma-separated records with a fixed header; ``elapsed_seconds`` is blank when unknown."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for name, ev in rows:
        el = ev.denoised.elapsed
        w.writerow(
            [
                name,
                fmt_db(ev.noisy.psnr_db),
                fmt_db(ev.denoised.psnr_db),
                f"{ev.noisy.ssim:.6f}",
                f"{ev.denoised.ssim:.6f}",
                "" if el is None else f"{el:.4f}",
            ]
        )
    return out.getvalue()


def read_records(text: str) -> list[dict[str, str]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return rows


def summary_table(rows: list[tuple[str, PairEvaluation]]) -> str:
    """Per-image lines plus a mean row, columns as in a before/after denoising table."""
    head = f"{'image':<24} {'after add noise':>16} {'after denoising':>16} {'gain':>8} {'SSIM noisy':>11} {'SSIM denoised':>14}"
    lines = [head, "-" * len(head)]
    for name, ev in rows:
        lines.append(
            f"{name[:24]:<24} {fmt_db(ev.noisy.psnr_db):>16} {fmt_db(ev.denoised.psnr_db):>16} "
            f"{fmt_db(ev.gain_db):>8} {ev.noisy.ssim:>11.4f} {ev.denoised.ssim:>14.4f}"
        )
    if rows:
        mn = float(np.mean([ev.noisy.psnr_db for _, ev in rows]))
        md = float(np.mean([ev.denoised.psnr_db for _, ev in rows]))
        sn = float(np.mean([ev.noisy.ssim for _, ev in rows]))
        sd = float(np.mean([ev.denoised.ssim for _, ev in rows]))
        lines.append("-" * len(head))
        lines.append(
            f"{'mean':<24} {fmt_db(mn):>16} {fmt_db(md):>16} {fmt_db(psnr_gain(mn, md)):>8} {sn:>11.4f} {sd:>14.4f}"
        )
    return "\n".join(lines)
