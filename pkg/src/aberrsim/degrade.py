"""Patch-wise spatially variant convolution and the aberrated-image synthesis chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import _parallel  # noqa: F401
from .errors import ConfigError, ShapeError
from .isp import IspParams, demosaic, forward_isp, invert_isp, mosaic, add_noise
from .psf import PsfGrid


@njit(parallel=True, cache=True)
def _convolve_patches(padded, kernels, shifts, out, patch, pad):
    # padded: (C, H + 2 pad, W + 2 pad); kernels: (C, gh, gw, k, k); shifts: (C, gh, gw, 2) as (dx, dy)
    C, gh, gw, k, _ = kernels.shape
    H = out.shape[1]
    W = out.shape[2]
    h = k // 2
    for idx in prange(C * gh * gw):
        c = idx // (gh * gw)
        rem = idx % (gh * gw)
        gi = rem // gw
        gj = rem % gw
        y0 = gi * patch
        x0 = gj * patch
        ny = min(patch, H - y0)
        nx = min(patch, W - x0)
        sx = shifts[c, gi, gj, 0]
        sy = shifts[c, gi, gj, 1]
        # contiguous copy of the source window keeps the hot loop cache friendly
        top = y0 - h - sy + pad
        left = x0 - h - sx + pad
        win = np.empty((ny + k - 1, nx + k - 1))
        for y in range(ny + k - 1):
            for x in range(nx + k - 1):
                win[y, x] = padded[c, top + y, left + x]
        acc = np.zeros((ny, nx))
        # taps outermost so each output pixel sums its taps in a fixed order
        for a in range(k):
            for b in range(k):
                w = kernels[c, gi, gj, k - 1 - a, k - 1 - b]
                for y in range(ny):
                    for x in range(nx):
                        acc[y, x] += w * win[y + a, x + b]
        out[c, y0:y0 + ny, x0:x0 + nx] = acc


def convolve_patchwise(image, grid: PsfGrid, patch_size: int | None = None, padding: str = "reflect",
                       apply_offsets: bool = True) -> np.ndarray:
    """Blur each ``patch_size`` tile with its own kernel from ``grid``.

    Output pixel ``p`` of a tile is ``sum_d K[d] * I[p - d - shift]`` over the
    reflect-padded input, where ``shift`` is the tile's whole-pixel
    ``center_offset`` (skipped when ``apply_offsets`` is False). Channel ``c``
    uses wavelength ``c`` of the grid; a single-wavelength grid serves every
    channel.
    """
    img = np.asarray(image, dtype=float)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    if img.ndim != 3:
        raise ShapeError(f"expected (H, W) or (H, W, C), got {img.shape}")
    H, W, C = img.shape
    patch = grid.patch_size if patch_size is None else int(patch_size)
    if patch != grid.patch_size:
        raise ShapeError(f"patch size {patch} does not match the PSF grid's {grid.patch_size}")
    gh, gw, nwl, k, _ = grid.kernels.shape
    if gh * patch < H or gw * patch < W or (gh - 1) * patch >= H or (gw - 1) * patch >= W:
        raise ShapeError(f"a {gh}x{gw} grid of {patch}px patches does not tile a {H}x{W} image")
    if nwl not in (1, C):
        raise ShapeError(f"grid has {nwl} wavelengths for a {C}-channel image")
    if padding != "reflect":
        raise ConfigError(f"unsupported padding {padding!r}")

    kernels = np.ascontiguousarray(np.moveaxis(grid.kernels, 2, 0), dtype=np.float64)
    shifts = np.moveaxis(grid.offsets, 2, 0)
    shifts = np.rint(shifts).astype(np.int64) if apply_offsets else np.zeros(shifts.shape, dtype=np.int64)
    if nwl == 1 and C > 1:
        kernels = np.ascontiguousarray(np.broadcast_to(kernels, (C,) + kernels.shape[1:]))
        shifts = np.ascontiguousarray(np.broadcast_to(shifts, (C,) + shifts.shape[1:]))
    pad = k // 2 + int(np.abs(shifts).max(initial=0))
    planes = np.moveaxis(img, 2, 0)
    padded = np.pad(planes, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty((C, H, W))
    _convolve_patches(np.ascontiguousarray(padded), kernels, shifts, out, patch, pad)
    out = np.moveaxis(out, 0, 2)
    return out[..., 0] if squeeze else out


@dataclass(frozen=True)
class DegradeConfig:
    patch_size: int = 16
    padding: str = "reflect"
    apply_isp: bool = False
    noise_seed: int | None = None
    chain_isp: IspParams | None = None
    # parameters used to unprocess the input; defaults to ``chain_isp``
    inverse_isp: IspParams | None = None
    apply_offsets: bool = True

    def __post_init__(self):
        p = self.patch_size
        if p < 1 or p & (p - 1):
            raise ConfigError(f"patch size must be a power of two, got {p}")
        if self.apply_isp and self.chain_isp is None:
            raise ConfigError("apply_isp needs chain_isp parameters")


def simulate_aberrated(gt, grid: PsfGrid, config: DegradeConfig) -> np.ndarray:
    """Render an aberrated sRGB image from a clean sRGB ``gt``.

    Without ISP the blur is applied directly to sRGB values. With ISP the
    image is unprocessed to linear raw, blurred, mosaicked, made noisy,
    demosaicked and re-processed to sRGB.
    """
    img = np.asarray(gt, dtype=float)
    if not config.apply_isp:
        out = convolve_patchwise(img, grid, config.patch_size, config.padding, config.apply_offsets)
        return np.clip(out, 0.0, 1.0)
    inv = config.inverse_isp or config.chain_isp
    raw = invert_isp(img, inv)
    blurred = convolve_patchwise(raw, grid, config.patch_size, config.padding, config.apply_offsets)
    bayer = mosaic(np.maximum(blurred, 0.0))
    if config.noise_seed is not None:
        bayer = add_noise(bayer, config.chain_isp, config.noise_seed)
    return forward_isp(demosaic(bayer), config.chain_isp)
