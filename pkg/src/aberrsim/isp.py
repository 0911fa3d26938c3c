"""Forward and inverse camera ISP: white balance, colour matrix, gamma, RGGB mosaic, noise.

Images are float arrays shaped ``(H, W, 3)`` (``(H, W)`` for Bayer raw) with
values nominally in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli
import tomli_w
from scipy import ndimage

from .errors import ConfigError, DataIOError, ShapeError

log = logging.getLogger(__name__)

BAYER_PATTERNS = ("RGGB",)
# channel index at (row % 2, col % 2)
_RGGB = np.array([[0, 1], [1, 2]])


@dataclass(frozen=True)
class IspParams:
    wb_gains: tuple = (2.0, 1.0, 1.8)
    ccm: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    gamma: float = 2.2
    shot_gain: float = 1e-4
    read_var: float = 1e-6
    bayer: str = "RGGB"

    def __post_init__(self):
        wb = tuple(float(g) for g in self.wb_gains)
        ccm = tuple(tuple(float(x) for x in row) for row in self.ccm)
        object.__setattr__(self, "wb_gains", wb)
        object.__setattr__(self, "ccm", ccm)
        if len(wb) != 3 or min(wb) <= 0:
            raise ConfigError(f"wb gains must be three positive numbers, got {wb}")
        m = np.array(ccm)
        if m.shape != (3, 3):
            raise ConfigError("ccm must be 3x3")
        if abs(np.linalg.det(m)) <= 1e-6:
            raise ConfigError("ccm is not invertible")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if self.shot_gain < 0 or self.read_var < 0:
            raise ConfigError("noise variances must be non-negative")
        if self.bayer not in BAYER_PATTERNS:
            raise ConfigError(f"unsupported Bayer layout {self.bayer!r}")

    @property
    def ccm_matrix(self) -> np.ndarray:
        return np.array(self.ccm)

    @classmethod
    def identity(cls) -> "IspParams":
        return cls(wb_gains=(1.0, 1.0, 1.0), gamma=1.0, shot_gain=0.0, read_var=0.0)

    def to_dict(self) -> dict:
        return {
            "wb": list(self.wb_gains),
            "ccm": [list(r) for r in self.ccm],
            "gamma": self.gamma,
            "shot_gain": self.shot_gain,
            "read_var": self.read_var,
            "bayer": self.bayer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IspParams":
        try:
            return cls(
                wb_gains=tuple(d["wb"]),
                ccm=tuple(tuple(r) for r in d["ccm"]),
                gamma=float(d["gamma"]),
                shot_gain=float(d.get("shot_gain", 0.0)),
                read_var=float(d.get("read_var", 0.0)),
                bayer=str(d.get("bayer", "RGGB")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed ISP parameters: {exc!r}") from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_isp(path) -> IspParams:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return IspParams.from_dict(tomli.load(fh))
    except FileNotFoundError as exc:
        raise DataIOError(f"ISP file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_isp(params: IspParams, path) -> None:
    try:
        Path(path).write_text(tomli_w.dumps(params.to_dict()))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def default_isp() -> IspParams:
    return load_isp(Path(__file__).parent / "data" / "isp_default.toml")


def _check_rgb(img):
    img = np.asarray(img, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {img.shape}")
    return img


def gamma_encode(x, gamma: float):
    return np.power(np.clip(x, 0.0, None), 1.0 / gamma)


def gamma_decode(x, gamma: float):
    return np.power(np.clip(x, 0.0, None), gamma)


def invert_isp(srgb, params: IspParams, return_count: bool = False):
    """sRGB -> linear camera RGB: undo gamma, then the colour matrix, then white balance.

    Negative values produced by the inverse matrix are clamped to zero; their
    count is logged, and returned as well when ``return_count`` is set.
    """
    img = _check_rgb(srgb)
    lin = gamma_decode(img, params.gamma)
    lin = lin @ np.linalg.inv(params.ccm_matrix).T
    lin = lin / np.array(params.wb_gains)
    neg = int((lin < 0).sum())
    if neg:
        log.debug("invert_isp clamped %d negative values", neg)
        lin = np.maximum(lin, 0.0)
    return (lin, neg) if return_count else lin


def mosaic(rgb) -> np.ndarray:
    """Sample an RGGB Bayer raw frame from a linear RGB image."""
    img = _check_rgb(rgb)
    H, W, _ = img.shape
    if H % 2 or W % 2:
        raise ShapeError(f"Bayer mosaic needs even dimensions, got {H}x{W}")
    rows = np.arange(H)[:, None] % 2
    cols = np.arange(W)[None, :] % 2
    ch = _RGGB[rows, cols]
    return np.take_along_axis(img, ch[..., None], axis=2)[..., 0]


def bayer_masks(shape) -> np.ndarray:
    """``(H, W, 3)`` boolean site masks of the RGGB layout."""
    H, W = shape
    ch = _RGGB[np.arange(H)[:, None] % 2, np.arange(W)[None, :] % 2]
    return ch[..., None] == np.arange(3)


def add_noise(raw, params: IspParams, seed: int) -> np.ndarray:
    """Heteroscedastic Gaussian noise, variance ``shot_gain * x + read_var``.

    Draws come from a Philox counter-based stream keyed on ``seed`` and
    consumed in raster order, so pixel ``i`` always receives draw ``i``.
    """
    raw = np.asarray(raw, dtype=float)
    if (raw < 0).any():
        raise ConfigError("raw values must be non-negative")
    if params.shot_gain == 0 and params.read_var == 0:
        return raw.copy()
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    z = rng.standard_normal(raw.size).reshape(raw.shape)
    std = np.sqrt(params.shot_gain * raw + params.read_var)
    return np.maximum(raw + std * z, 0.0)


_K_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]]) / 4.0
_K_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 4.0


def demosaic(bayer) -> np.ndarray:
    """Bilinear RGGB demosaic with mirrored borders (the mirror keeps the CFA phase)."""
    raw = np.asarray(bayer, dtype=float)
    if raw.ndim != 2 or raw.shape[0] % 2 or raw.shape[1] % 2:
        raise ShapeError(f"expected an even-sized 2-D raw frame, got {raw.shape}")
    masks = bayer_masks(raw.shape)
    out = np.empty(raw.shape + (3,))
    for c, k in ((0, _K_RB), (1, _K_G), (2, _K_RB)):
        out[..., c] = ndimage.convolve(raw * masks[..., c], k, mode="mirror")
    return out


def forward_isp(raw_rgb, params: IspParams, with_mosaic: bool = False, noise_seed: int | None = None):
    """Linear camera RGB -> sRGB.

    With ``with_mosaic`` the image goes through mosaic, optional noise and
    demosaic first. Then white balance, colour matrix and gamma encoding;
    the result is clipped to [0, 1].
    """
    img = _check_rgb(raw_rgb)
    if with_mosaic:
        raw = mosaic(img)
        if noise_seed is not None:
            raw = add_noise(raw, params, noise_seed)
        img = demosaic(raw)
    elif noise_seed is not None:
        raise ConfigError("noise is applied in the Bayer domain; enable with_mosaic")
    lin = img * np.array(params.wb_gains)
    lin = lin @ params.ccm_matrix.T
    return np.clip(gamma_encode(np.clip(lin, 0.0, 1.0), params.gamma), 0.0, 1.0)
