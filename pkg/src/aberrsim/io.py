"""File formats: PNG/PFM images, the APSF PSF-stack binary and flat f32 tensors.

APSF layout (all little-endian)::

    b"APSF" | version u32 | grid_h u32 | grid_w u32 | n_wl u32 | kernel u32
    | patch_size u32 | pitch_um f32
    | kernels f32[gh][gw][wl][k][k]
    | offsets f32[gh][gw][wl][2]          (dx, dy) in pixels

A JSON sidecar (``<file>.json``) repeats the header plus image dims and
wavelengths, which the binary does not carry.

Tensor layout: ``u32 header_len | UTF-8 JSON header | f32 data`` with the
header holding ``shape``, ``dtype`` ("<f4") and ``role``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import cv2
import numpy as np

from .errors import ConfigError, DataIOError
from .psf import PsfGrid

APSF_MAGIC = b"APSF"
APSF_VERSION = 1
_APSF_HEADER = struct.Struct("<4s6If")


def read_image(path) -> np.ndarray:
    """Read a PNG (8 or 16 bit) or PFM file as float RGB in [0, 1] (PFM unscaled)."""
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"image not found: {path}")
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise DataIOError(f"cannot decode image: {path}")
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_BGRA2RGB if data.shape[2] == 4 else cv2.COLOR_BGR2RGB)
    else:
        data = np.repeat(data[..., None], 3, axis=2)
    scale = 65535.0 if data.dtype == np.uint16 else 255.0
    return data.astype(np.float64) / scale


def write_image(path, img, bit_depth: int = 8) -> None:
    path = Path(path)
    img = np.asarray(img, dtype=float)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, img)
        return
    if bit_depth not in (8, 16):
        raise ConfigError("PNG bit depth must be 8 or 16")
    top = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * top).astype(np.uint8 if bit_depth == 8 else np.uint16)
    if q.ndim == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), q):
        raise DataIOError(f"cannot write image: {path}")


def write_pfm(path, img) -> None:
    img = np.asarray(img, dtype="<f4")
    color = img.ndim == 3
    H, W = img.shape[:2]
    header = f"{'PF' if color else 'Pf'}\n{W} {H}\n-1.0\n".encode()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(img[::-1]).tobytes())
    except OSError as exc:
        raise DataIOError(str(exc)) from exc


def read_pfm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            kind = fh.readline().strip()
            W, H = map(int, fh.readline().split())
            scale = float(fh.readline())
            data = np.frombuffer(fh.read(), dtype="<f4" if scale < 0 else ">f4")
    except (OSError, ValueError) as exc:
        raise DataIOError(f"bad PFM file {path}: {exc}") from exc
    ch = 3 if kind == b"PF" else 1
    img = data.reshape(H, W, ch)[::-1].astype(np.float64)
    return img if ch == 3 else img[..., 0]


def save_psf_grid(grid: PsfGrid, path) -> None:
    path = Path(path)
    gh, gw, nwl, k, _ = grid.kernels.shape
    header = _APSF_HEADER.pack(APSF_MAGIC, APSF_VERSION, gh, gw, nwl, k, grid.patch_size, grid.pixel_pitch)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(grid.kernels, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(grid.offsets, dtype="<f4").tobytes())
        sidecar = {
            "magic": "APSF",
            "version": APSF_VERSION,
            "grid_h": gh,
            "grid_w": gw,
            "n_wl": nwl,
            "kernel": k,
            "patch_size": grid.patch_size,
            "pitch_um": grid.pixel_pitch,
            "image_dims": list(grid.image_dims),
            "wavelengths_um": list(grid.wavelengths),
            "out_of_field": int(np.count_nonzero(grid.out_of_field)),
            "max_clipped_fraction": float(np.max(grid.clipped)),
            "meta": grid.meta,
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    except OSError as exc:
        raise DataIOError(str(exc)) from exc


def load_psf_grid(path) -> PsfGrid:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read PSF stack {path}: {exc}") from exc
    if len(blob) < _APSF_HEADER.size:
        raise DataIOError(f"{path}: truncated APSF header")
    magic, version, gh, gw, nwl, k, patch, pitch = _APSF_HEADER.unpack_from(blob)
    if magic != APSF_MAGIC:
        raise DataIOError(f"{path}: not an APSF file")
    if version != APSF_VERSION:
        raise DataIOError(f"{path}: unsupported APSF version {version}")
    nk = gh * gw * nwl * k * k
    no = gh * gw * nwl * 2
    body = np.frombuffer(blob, dtype="<f4", offset=_APSF_HEADER.size)
    if body.size != nk + no:
        raise DataIOError(f"{path}: payload size does not match header")
    kernels = body[:nk].reshape(gh, gw, nwl, k, k).astype(np.float64)
    offsets = body[nk:].reshape(gh, gw, nwl, 2).astype(np.float64)
    sidecar_path = Path(str(path) + ".json")
    if sidecar_path.exists():
        side = json.loads(sidecar_path.read_text())
        dims = tuple(side["image_dims"])
        wavelengths = tuple(side["wavelengths_um"])
    else:
        dims = (gh * patch, gw * patch)
        wavelengths = tuple(range(nwl))
    return PsfGrid(kernels, offsets, int(patch), dims, float(pitch), wavelengths)


def save_tensor(path, array, role: str = "") -> None:
    arr = np.asarray(array, dtype="<f4")
    header = json.dumps({"shape": list(arr.shape), "dtype": "<f4", "role": role}).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(arr).tobytes())
    except OSError as exc:
        raise DataIOError(str(exc)) from exc


def load_tensor(path) -> tuple[np.ndarray, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read tensor {path}: {exc}") from exc
    (n,) = struct.unpack_from("<I", blob)
    try:
        header = json.loads(blob[4:4 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataIOError(f"{path}: bad tensor header") from exc
    data = np.frombuffer(blob, dtype="<f4", offset=4 + n)
    shape = tuple(header["shape"])
    if data.size != int(np.prod(shape)):
        raise DataIOError(f"{path}: payload does not match shape {shape}")
    return data.reshape(shape).copy(), header
