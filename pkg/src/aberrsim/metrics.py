"""Full-reference image quality: PSNR and single-scale SSIM."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import ShapeError

REC601 = np.array([0.299, 0.587, 0.114])
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11


def _pair(ref, test):
    a = np.asarray(ref, dtype=float)
    b = np.asarray(test, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(ref, test, peak: float = 1.0) -> float:
    """PSNR in dB; ``math.inf`` for identical inputs."""
    a, b = _pair(ref, test)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ REC601
    if img.ndim == 2:
        return img
    raise ShapeError(f"expected (H, W) or (H, W, 3), got {img.shape}")


def _gaussian_window():
    ax = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(ax**2) / (2 * SSIM_SIGMA**2))
    g /= g.sum()
    return g


def ssim(ref, test, data_range: float = 1.0) -> float:
    """Mean SSIM over every fully contained 11x11 Gaussian window (sigma 1.5) of the luma."""
    a, b = _pair(ref, test)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"image smaller than the {SSIM_WINDOW}px SSIM window")
    g = _gaussian_window()
    r = SSIM_WINDOW // 2

    def blur(z):
        z = ndimage.correlate1d(z, g, axis=0, mode="reflect")
        z = ndimage.correlate1d(z, g, axis=1, mode="reflect")
        return z[r:-r, r:-r]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def metric_report(pairs) -> dict:
    """``{"pairs": [...], "mean": {...}}`` for an iterable of ``(name, ref, test)``."""
    rows = []
    for name, ref, test in pairs:
        rows.append({"name": name, "psnr_db": psnr(ref, test), "ssim": ssim(ref, test)})
    mean = {
        "psnr_db": float(np.mean([r["psnr_db"] for r in rows])) if rows else float("nan"),
        "ssim": float(np.mean([r["ssim"] for r in rows])) if rows else float("nan"),
    }
    return {"pairs": rows, "mean": mean}
