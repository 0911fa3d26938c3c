"""Spatially variant PSFs from traced pupil bundles.

Each ray's image-plane intersection is replaced by a small Gaussian spot whose
width follows the local spacing of neighbouring rays, and the spots are summed
on the pixel grid. Kernels are ``k x k`` windows centred on the paraxial image
point of the field, shifted by a whole number of pixels (``center_offset``)
so off-axis bundles stay inside the window; that shift is geometric
distortion and is re-applied when the kernel is used for convolution.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from . import _parallel  # noqa: F401  (numba threading setup)
from .errors import ConfigError, DegenerateFieldError
from .optics import (
    WAVELENGTH_C,
    WAVELENGTH_D,
    WAVELENGTH_F,
    LensPrescription,
    field_direction,
    launch_bundle,
    paraxial_trace,
    trace_rays,
)

# R, G, B
DEFAULT_WAVELENGTHS = (WAVELENGTH_C, WAVELENGTH_D, WAVELENGTH_F)
DEFAULT_KERNEL_SIZE = 25
DEFAULT_RAYS = 1024
SYN_PIXEL_PITCH_UM = 11.43
CAMERA_PIXEL_PITCH_UM = 3.9
# spots narrower than this would fall between pixel centres
MIN_SIGMA_PX = 0.5


@dataclass(frozen=True)
class PupilSampling:
    points: np.ndarray  # (N, 2) mm
    grid_index: np.ndarray  # (N, 2) row/col on the n x n sampling grid
    grid_n: int
    radius: float

    @property
    def count(self) -> int:
        return len(self.points)


def sample_pupil(aperture_radius: float, target_count: int) -> PupilSampling:
    """Square grid of cell centres over the stop's bounding square, clipped to the circle."""
    if not aperture_radius > 0:
        raise ConfigError("aperture radius must be positive")
    if target_count < 4:
        raise ConfigError("need at least 4 pupil samples")
    n = math.ceil(math.sqrt(target_count))
    g = ((np.arange(n) + 0.5) / n * 2.0 - 1.0) * aperture_radius
    yy, xx = np.meshgrid(g, g, indexing="ij")
    inside = xx**2 + yy**2 <= aperture_radius**2
    rows, cols = np.nonzero(inside)
    pts = np.column_stack([xx[inside], yy[inside]])
    return PupilSampling(pts, np.column_stack([rows, cols]), n, float(aperture_radius))


@dataclass
class PsfKernel:
    weights: np.ndarray
    pixel_pitch: float  # um
    center_offset: tuple = (0, 0)  # whole-pixel (dx, dy) of the window from the paraxial point
    clipped_fraction: float = 0.0

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def centroid(self) -> tuple[float, float]:
        return kernel_centroid(self.weights)


def kernel_centroid(weights: np.ndarray) -> tuple[float, float]:
    """Energy centroid ``(dx, dy)`` in pixels relative to the window centre."""
    k = weights.shape[0]
    h = (k - 1) / 2.0
    total = weights.sum()
    ax = np.arange(k) - h
    return float((weights.sum(axis=0) * ax).sum() / total), float((weights.sum(axis=1) * ax).sum() / total)


@njit(cache=True)
def _splat_one(u, v, s, valid, k, out):
    """Accumulate Gaussian spots (pixel units, window-centre origin) into ``out``.

    Returns the energy that fell outside the window.
    """
    h = (k - 1) // 2
    clipped = 0.0
    norm = 1.0 / math.sqrt(2.0 * math.pi)
    for i in range(u.shape[0]):
        if not valid[i]:
            continue
        sig = s[i]
        reach = 3.0 * sig
        inv = 1.0 / (2.0 * sig * sig)
        amp = norm / sig
        c0 = int(math.ceil(u[i] - reach))
        c1 = int(math.floor(u[i] + reach))
        r0 = int(math.ceil(v[i] - reach))
        r1 = int(math.floor(v[i] + reach))
        for r in range(r0, r1 + 1):
            dy = r - v[i]
            for c in range(c0, c1 + 1):
                dx = c - u[i]
                d2 = dx * dx + dy * dy
                if d2 > reach * reach:
                    continue
                e = amp * math.exp(-d2 * inv)
                if -h <= r <= h and -h <= c <= h:
                    out[r + h, c + h] += e
                else:
                    clipped += e
    return clipped


@njit(parallel=True, cache=True)
def _splat_many(u, v, s, valid, k, out, clipped):
    for b in prange(u.shape[0]):
        clipped[b] = _splat_one(u[b], v[b], s[b], valid[b], k, out[b])


def _finish(weights, clipped):
    total = weights.sum()
    if not total > 0:
        raise DegenerateFieldError("no energy landed inside the kernel window")
    return weights / total, clipped / (clipped + total)


def splat_gaussian(hits, pixel_pitch: float, kernel_size: int, center, sigma=None) -> PsfKernel:
    """Sum one Gaussian spot per hit on a ``kernel_size`` pixel window around ``center``.

    ``hits`` and ``center`` are in mm, ``pixel_pitch`` in um. ``sigma`` (mm,
    scalar or per hit) defaults to one pixel; it is floored at half a pixel.
    """
    if kernel_size % 2 != 1:
        raise ConfigError("kernel_size must be odd")
    hits = np.atleast_2d(np.asarray(hits, dtype=float))
    valid = np.all(np.isfinite(hits), axis=1)
    if not valid.any():
        raise DegenerateFieldError("no live hits to splat")
    pitch_mm = pixel_pitch * 1e-3
    sig = np.broadcast_to(pitch_mm if sigma is None else np.asarray(sigma, dtype=float), (len(hits),))
    sig_px = np.maximum(np.nan_to_num(sig / pitch_mm, nan=MIN_SIGMA_PX), MIN_SIGMA_PX)
    u = np.where(valid, (hits[:, 0] - center[0]) / pitch_mm, 0.0)
    v = np.where(valid, (hits[:, 1] - center[1]) / pitch_mm, 0.0)
    out = np.zeros((kernel_size, kernel_size))
    clipped = _splat_one(u, v, sig_px, valid, kernel_size, out)
    w, frac = _finish(out, clipped)
    return PsfKernel(w, pixel_pitch, (0, 0), float(frac))


def ray_spacing_sigma(hits_grid: np.ndarray) -> np.ndarray:
    """Gaussian width per ray from the spacing of its pupil-grid neighbours.

    ``hits_grid`` has shape ``(..., n, n, 2)`` with NaN for missing or dead rays.
    Delta-x (Delta-y) is the mean image-plane distance to the live left/right
    (up/down) neighbours; a direction with no live neighbour borrows the other.
    Returns ``sqrt(dx**2 + dy**2) / 3`` with NaN where no neighbour is alive.
    """
    def neighbour_mean(axis):
        d = np.linalg.norm(np.diff(hits_grid, axis=axis), axis=-1)
        pad_shape = list(d.shape)
        pad_shape[axis] = 1
        nan = np.full(pad_shape, np.nan)
        before = np.concatenate([nan, d], axis=axis)
        after = np.concatenate([d, nan], axis=axis)
        with np.errstate(invalid="ignore"):
            return np.nanmean(np.stack([before, after]), axis=0)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ax_x = hits_grid.ndim - 2
        dx = neighbour_mean(ax_x)
        dy = neighbour_mean(ax_x - 1)
    dx = np.where(np.isnan(dx), dy, dx)
    dy = np.where(np.isnan(dy), dx, dy)
    return np.sqrt(dx * dx + dy * dy) / 3.0


def _grid_hits(sampling: PupilSampling, hits: np.ndarray) -> np.ndarray:
    """Scatter ``(..., N, 2)`` hits onto the ``(..., n, n, 2)`` pupil grid."""
    n = sampling.grid_n
    out = np.full(hits.shape[:-2] + (n, n, 2), np.nan)
    out[..., sampling.grid_index[:, 0], sampling.grid_index[:, 1], :] = hits
    return out


def rms_spot_radius(hits) -> float:
    """RMS distance of hits (mm) from their centroid, in micrometres."""
    h = np.asarray(hits, dtype=float)
    h = h[np.all(np.isfinite(h), axis=1)]
    if len(h) < 2:
        raise DegenerateFieldError("need at least two hits for an RMS spot radius")
    d = h - h.mean(axis=0)
    return float(np.sqrt((d**2).sum(axis=1).mean()) * 1000.0)


def _field_batch(prescription, thetas, azimuths, wavelength, sampling, pixel_pitch, kernel_size, efl):
    """Kernels for a batch of fields sharing one wavelength."""
    B, N = len(thetas), sampling.count
    pitch_mm = pixel_pitch * 1e-3
    origins = np.empty((B, N, 3))
    dirs = np.empty((B, N, 3))
    for b in range(B):
        o, d = launch_bundle(prescription, field_direction(thetas[b], azimuths[b]), sampling.points)
        origins[b], dirs[b] = o, d
    res = trace_rays(prescription, origins.reshape(-1, 3), dirs.reshape(-1, 3), wavelength)
    hits = res.hits.reshape(B, N, 2)
    alive = res.alive.reshape(B, N)
    n_alive = alive.sum(axis=1)
    ok = n_alive > 0

    height = efl * np.tan(thetas)
    parax = np.column_stack([height * np.cos(azimuths), height * np.sin(azimuths)])
    with np.errstate(invalid="ignore"):
        centroid = np.nansum(hits, axis=1) / np.maximum(n_alive, 1)[:, None]
    shift = np.where(ok[:, None], np.round((centroid - parax) / pitch_mm), 0.0)
    center = parax + shift * pitch_mm

    sigma = ray_spacing_sigma(_grid_hits(sampling, hits))
    sigma = sigma[:, sampling.grid_index[:, 0], sampling.grid_index[:, 1]]
    sig_px = np.maximum(np.nan_to_num(sigma / pitch_mm, nan=MIN_SIGMA_PX), MIN_SIGMA_PX)
    u = np.where(alive, (hits[..., 0] - center[:, :1]) / pitch_mm, 0.0)
    v = np.where(alive, (hits[..., 1] - center[:, 1:]) / pitch_mm, 0.0)
    out = np.zeros((B, kernel_size, kernel_size))
    clipped = np.zeros(B)
    _splat_many(u, v, sig_px, alive, kernel_size, out, clipped)
    total = out.sum(axis=(1, 2))
    ok &= total > 0
    safe = np.where(ok, total, 1.0)
    out /= safe[:, None, None]
    frac = np.where(ok, clipped / (clipped + safe), 0.0)
    return out, shift, frac, ok, hits, alive


def trace_field_psf(
    prescription: LensPrescription,
    field_angle,
    wavelength: float,
    sampling: PupilSampling,
    pixel_pitch: float,
    kernel_size: int = DEFAULT_KERNEL_SIZE,
) -> PsfKernel:
    """PSF of one field ``(theta_x, theta_y)`` in radians; polar angle is their norm."""
    if kernel_size % 2 != 1:
        raise ConfigError("kernel_size must be odd")
    tx, ty = field_angle
    theta = math.hypot(tx, ty)
    if theta > prescription.max_half_fov + 1e-12:
        raise ConfigError(f"field {math.degrees(theta):.3f} deg exceeds the lens half field")
    efl = paraxial_trace(prescription, WAVELENGTH_D).efl
    out, shift, frac, ok, _, _ = _field_batch(
        prescription, np.array([theta]), np.array([math.atan2(ty, tx)]),
        wavelength, sampling, pixel_pitch, kernel_size, efl,
    )
    if not ok[0]:
        raise DegenerateFieldError(f"every ray of the {math.degrees(theta):.3f} deg bundle died")
    return PsfKernel(out[0], pixel_pitch, (int(shift[0, 0]), int(shift[0, 1])), float(frac[0]))


@dataclass
class PsfGrid:
    kernels: np.ndarray  # (gh, gw, n_wl, k, k)
    offsets: np.ndarray  # (gh, gw, n_wl, 2) whole-pixel (dx, dy)
    patch_size: int
    image_dims: tuple  # (H, W)
    pixel_pitch: float  # um
    wavelengths: tuple
    clipped: np.ndarray | None = None  # (gh, gw, n_wl)
    out_of_field: np.ndarray | None = None  # (gh, gw) bool, kernel copied from a neighbour
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        gh, gw, nwl, k, k2 = self.kernels.shape
        H, W = self.image_dims
        if k != k2 or k % 2 != 1:
            raise ConfigError("kernels must be square with odd size")
        if gh * self.patch_size < H or gw * self.patch_size < W:
            raise ConfigError("PSF grid does not cover the image")
        if self.offsets.shape != (gh, gw, nwl, 2):
            raise ConfigError("offset array does not match the kernel grid")
        if len(self.wavelengths) != nwl:
            raise ConfigError("wavelength list does not match the kernel grid")
        if self.clipped is None:
            self.clipped = np.zeros((gh, gw, nwl))
        if self.out_of_field is None:
            self.out_of_field = np.zeros((gh, gw), dtype=bool)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.kernels.shape[:2]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[-1]

    @classmethod
    def uniform(cls, kernel, image_dims, patch_size, n_channels=3, pixel_pitch=SYN_PIXEL_PITCH_UM,
                wavelengths=None, offset=(0, 0)):
        """Grid that uses ``kernel`` (k x k, or n_ch x k x k) for every patch."""
        H, W = image_dims
        gh, gw = -(-H // patch_size), -(-W // patch_size)
        kern = np.asarray(kernel, dtype=float)
        if kern.ndim == 2:
            kern = np.broadcast_to(kern, (n_channels,) + kern.shape)
        nwl = kern.shape[0]
        kernels = np.broadcast_to(kern, (gh, gw) + kern.shape).copy()
        offsets = np.broadcast_to(np.asarray(offset, dtype=float), (gh, gw, nwl, 2)).copy()
        wl = tuple(wavelengths) if wavelengths is not None else tuple(DEFAULT_WAVELENGTHS[:nwl])
        return cls(kernels, offsets, patch_size, (H, W), pixel_pitch, wl)


def grid_shape_for(image_dims, patch_size: int) -> tuple[int, int]:
    H, W = image_dims
    return -(-H // patch_size), -(-W // patch_size)


def patch_centers_mm(image_dims, patch_size: int, pixel_pitch: float) -> np.ndarray:
    """``(gh, gw, 2)`` image-plane (x, y) of each patch centre, optical axis at the image centre."""
    H, W = image_dims
    gh, gw = grid_shape_for(image_dims, patch_size)
    ys = (np.arange(gh) * patch_size + np.minimum(np.arange(gh) * patch_size + patch_size, H)) / 2.0
    xs = (np.arange(gw) * patch_size + np.minimum(np.arange(gw) * patch_size + patch_size, W)) / 2.0
    pitch_mm = pixel_pitch * 1e-3
    yy, xx = np.meshgrid((ys - H / 2.0) * pitch_mm, (xs - W / 2.0) * pitch_mm, indexing="ij")
    return np.stack([xx, yy], axis=-1)


def build_psf_grid(
    prescription: LensPrescription,
    image_dims,
    patch_size: int,
    pixel_pitch: float = SYN_PIXEL_PITCH_UM,
    wavelengths=DEFAULT_WAVELENGTHS,
    rays_per_bundle: int = DEFAULT_RAYS,
    kernel_size: int = DEFAULT_KERNEL_SIZE,
    on_axis_only: bool = False,
    chunk: int = 128,
) -> PsfGrid:
    """One kernel per (patch, wavelength) for an ``image_dims`` sensor.

    Each patch's field angle comes from its centre through the inverse
    paraxial map ``theta = atan(r / efl)``. Patches beyond the lens half field
    (or whose bundle dies completely) copy the nearest valid kernel and are
    flagged in ``out_of_field``. ``on_axis_only`` gives every patch the
    on-axis PSF.
    """
    H, W = image_dims
    if patch_size < 1 or H < 1 or W < 1:
        raise ConfigError("image dims and patch size must be positive")
    if kernel_size % 2 != 1:
        raise ConfigError("kernel_size must be odd")
    gh, gw = grid_shape_for(image_dims, patch_size)
    efl = paraxial_trace(prescription, WAVELENGTH_D).efl
    centers = patch_centers_mm(image_dims, patch_size, pixel_pitch).reshape(-1, 2)
    r = np.hypot(centers[:, 0], centers[:, 1])
    thetas = np.arctan(r / efl)
    azimuths = np.arctan2(centers[:, 1], centers[:, 0])
    if on_axis_only:
        thetas[:] = 0.0
        azimuths[:] = 0.0
    in_field = thetas <= prescription.max_half_fov + 1e-12
    sampling = sample_pupil(prescription.aperture_radius_mm, rays_per_bundle)

    nwl = len(wavelengths)
    P = gh * gw
    kernels = np.zeros((P, nwl, kernel_size, kernel_size))
    offsets = np.zeros((P, nwl, 2))
    clipped = np.zeros((P, nwl))
    valid = np.zeros((P, nwl), dtype=bool)
    todo = np.nonzero(in_field)[0]
    for w, wl in enumerate(wavelengths):
        for start in range(0, len(todo), chunk):
            idx = todo[start:start + chunk]
            out, shift, frac, ok, _, _ = _field_batch(
                prescription, thetas[idx], azimuths[idx], wl, sampling, pixel_pitch, kernel_size, efl
            )
            kernels[idx, w] = out
            offsets[idx, w] = shift
            clipped[idx, w] = frac
            valid[idx, w] = ok
    good = valid.all(axis=1)
    if not good.any():
        raise DegenerateFieldError("no patch produced a valid PSF")
    bad = np.nonzero(~good)[0]
    if len(bad):
        gi, gj = np.divmod(np.arange(P), gw)
        src_candidates = np.nonzero(good)[0]
        for p in bad:
            d2 = (gi[src_candidates] - gi[p]) ** 2 + (gj[src_candidates] - gj[p]) ** 2
            src = src_candidates[np.argmin(d2)]
            kernels[p], offsets[p], clipped[p] = kernels[src], offsets[src], clipped[src]
    return PsfGrid(
        kernels=kernels.reshape(gh, gw, nwl, kernel_size, kernel_size),
        offsets=offsets.reshape(gh, gw, nwl, 2),
        patch_size=patch_size,
        image_dims=(H, W),
        pixel_pitch=float(pixel_pitch),
        wavelengths=tuple(float(x) for x in wavelengths),
        clipped=clipped.reshape(gh, gw, nwl),
        out_of_field=(~good).reshape(gh, gw),
        meta={"efl_mm": float(efl), "rays_per_bundle": sampling.count, "lens": prescription.digest()},
    )


def grid_distance(a: PsfGrid, b: PsfGrid) -> float:
    """Mean per-patch L2 distance between two grids over the same image.

    When patch sizes differ, every patch of the finer grid is compared with
    the coarser-grid patch containing its centre.
    """
    if tuple(a.image_dims) != tuple(b.image_dims):
        raise ConfigError("grids describe different image sizes")
    if a.kernels.shape[2:] != b.kernels.shape[2:]:
        raise ConfigError("grids differ in wavelength count or kernel size")
    fine, coarse = (a, b) if a.patch_size <= b.patch_size else (b, a)
    gh, gw = fine.grid_shape
    H, W = fine.image_dims
    cy = np.minimum((np.arange(gh) * fine.patch_size + fine.patch_size / 2.0), H - 0.5)
    cx = np.minimum((np.arange(gw) * fine.patch_size + fine.patch_size / 2.0), W - 0.5)
    iy = (cy // coarse.patch_size).astype(int)
    ix = (cx // coarse.patch_size).astype(int)
    other = coarse.kernels[iy][:, ix]
    diff = fine.kernels - other
    return float(np.sqrt((diff**2).sum(axis=(-1, -2))).mean())
