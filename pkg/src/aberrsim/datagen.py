"""Paired dataset generation with seeded synthetic-to-real gap perturbations.

Two modes:

``syn``
    nominal lens, 16 px patches, no ISP; every record is training data.
``real-sim``
    manufacturing-perturbed lens (one draw per dataset unless
    ``per_image_perturbation``), 8 px patches, ISP round trip with perturbed
    forward parameters and Bayer-domain noise, optional focus shift, and a
    train/test split.

All randomness derives from ``PerturbationSpec.seed`` through
``derive_seed(root, label, index)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from ._parallel import set_threads
from .degrade import DegradeConfig, simulate_aberrated
from .errors import AberrSimError, ConfigError, DataIOError, PerturbationError
from .io import read_image, write_image
from .isp import IspParams, default_isp, load_isp
from .optics import LensPrescription, Surface, load_prescription, paraxial_trace, reference_lens
from .psf import (
    DEFAULT_KERNEL_SIZE,
    DEFAULT_RAYS,
    DEFAULT_WAVELENGTHS,
    SYN_PIXEL_PITCH_UM,
    PsfGrid,
    build_psf_grid,
    grid_distance,
)

log = logging.getLogger(__name__)

MAX_RANGE = 0.2
PERTURB_RETRIES = 8
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
DOMAINS = ("syn", "real-sim-train", "real-sim-test")


def derive_seed(root: int, label: str, index: int = 0) -> int:
    """Stable 64-bit child seed for ``(root, label, index)``."""
    digest = hashlib.sha256(f"{int(root)}:{label}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _is_pow2(n: int) -> bool:
    return n >= 1 and not n & (n - 1)


@dataclass(frozen=True)
class PerturbationSpec:
    lens_range: float = 0.05
    isp_range: float = 0.02
    patch_size_target: int = 8
    patch_size_source: int = 16
    focus_shift_mm: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lens_range", "isp_range"):
            v = getattr(self, name)
            if not 0.0 <= v <= MAX_RANGE:
                raise ConfigError(f"{name} must lie in [0, {MAX_RANGE}], got {v}")
        for name in ("patch_size_target", "patch_size_source"):
            if not _is_pow2(getattr(self, name)):
                raise ConfigError(f"{name} must be a power of two")


def _factors(rng: np.random.Generator, rng_range: float, count: int) -> np.ndarray:
    # 1 + range * (2u - 1): with the same seed, factors scale linearly with range
    return 1.0 + rng_range * (2.0 * rng.random(count) - 1.0)


def _check_range(rng_range: float):
    if not 0.0 <= rng_range <= MAX_RANGE:
        raise ConfigError(f"perturbation range must lie in [0, {MAX_RANGE}], got {rng_range}")


def lens_factors(n_surfaces: int, rng_range: float, seed: int) -> np.ndarray:
    """``(n_surfaces, 4)`` multipliers for (c, s, n_d, abbe) of each surface."""
    return _factors(np.random.default_rng(seed), rng_range, 4 * n_surfaces).reshape(n_surfaces, 4)


def _apply_lens_factors(p: LensPrescription, f: np.ndarray) -> LensPrescription:
    surfaces = []
    for s, (fc, fs, fn, fv) in zip(p.surfaces, f):
        surfaces.append(
            Surface(
                curvature=s.curvature * fc,
                thickness_after=s.thickness_after * fs,
                semi_diameter=s.semi_diameter,
                n_d=None if s.n_d is None else s.n_d * fn,
                abbe=None if s.abbe is None else s.abbe * fv,
            )
        )
    return replace(p, surfaces=tuple(surfaces))


def perturb_prescription(p: LensPrescription, rng_range: float, seed: int) -> LensPrescription:
    """Scale every c, s, n_d and Abbe number by an independent factor in ``[1 - range, 1 + range]``.

    The stop size, half field and image distance are kept. A draw that no
    longer traces is redrawn from a derived seed, up to 8 times.
    """
    _check_range(rng_range)
    if rng_range == 0.0:
        return p
    for attempt in range(PERTURB_RETRIES):
        s = seed if attempt == 0 else derive_seed(seed, "retry", attempt)
        try:
            out = _apply_lens_factors(p, lens_factors(len(p.surfaces), rng_range, s))
            if paraxial_trace(out).efl > 0:
                return out
        except AberrSimError as exc:
            log.debug("perturbation attempt %d rejected: %s", attempt, exc)
    raise PerturbationError(f"no traceable perturbation after {PERTURB_RETRIES} draws")


def isp_factors(rng_range: float, seed: int) -> np.ndarray:
    """13 multipliers: wb (3), ccm row-major (9), gamma (1)."""
    return _factors(np.random.default_rng(seed), rng_range, 13)


def perturb_isp(params: IspParams, rng_range: float, seed: int) -> IspParams:
    """Jitter white balance, colour matrix entries and gamma multiplicatively.

    CCM rows are renormalised to sum to one afterwards so the matrix keeps
    preserving neutral grey; noise parameters are left alone.
    """
    _check_range(rng_range)
    if rng_range == 0.0:
        return params
    f = isp_factors(rng_range, seed)
    wb = np.array(params.wb_gains) * f[:3]
    ccm = params.ccm_matrix * f[3:12].reshape(3, 3)
    ccm = ccm / ccm.sum(axis=1, keepdims=True)
    return replace(
        params,
        wb_gains=tuple(wb),
        ccm=tuple(tuple(r) for r in ccm),
        gamma=params.gamma * f[12],
    )


@dataclass
class DatasetConfig:
    gt_dir: Path
    mode: str = "syn"
    lens: str = "mos_s1"
    isp: str | None = None
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    split: tuple = (782, 98)
    output_dir: Path = Path("out")
    pixel_pitch_um: float | str = SYN_PIXEL_PITCH_UM
    rays_per_bundle: int = DEFAULT_RAYS
    kernel_size: int = DEFAULT_KERNEL_SIZE
    wavelengths: tuple = DEFAULT_WAVELENGTHS
    bit_depth: int = 8
    per_image_perturbation: bool = False
    apply_offsets: bool = True

    def __post_init__(self):
        if self.mode not in ("syn", "real-sim"):
            raise ConfigError(f"mode must be 'syn' or 'real-sim', got {self.mode!r}")
        if len(self.split) != 2 or min(self.split) < 0 or sum(self.split) <= 0:
            raise ConfigError(f"split must be a (train, test) ratio, got {self.split}")
        self.gt_dir = Path(self.gt_dir)
        self.output_dir = Path(self.output_dir)

    def load_lens(self) -> LensPrescription:
        path = Path(self.lens)
        if path.suffix == ".toml" or path.exists():
            return load_prescription(path)
        return reference_lens(self.lens)

    def load_isp(self) -> IspParams:
        return default_isp() if self.isp is None else load_isp(self.isp)

    def pitch_for(self, lens: LensPrescription, dims) -> float:
        if self.pixel_pitch_um != "auto":
            return float(self.pixel_pitch_um)
        # sensor corner lands on the lens half field
        H, W = dims
        half_diag_px = math.hypot(H, W) / 2.0
        return paraxial_trace(lens).efl * math.tan(lens.max_half_fov) / half_diag_px * 1000.0


def load_dataset_config(path) -> DatasetConfig:
    """Read a TOML dataset config; relative paths resolve against the file's directory."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            d = tomli.load(fh)
    except FileNotFoundError as exc:
        raise DataIOError(f"dataset config not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent

    def rel(p):
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else base / q

    try:
        pert = PerturbationSpec(**d.get("perturbation", {}))
        lens = d.get("lens", "mos_s1")
        if lens.endswith(".toml"):
            lens = str(rel(lens))
        return DatasetConfig(
            gt_dir=rel(d["gt_dir"]),
            mode=d.get("mode", "syn"),
            lens=lens,
            isp=None if d.get("isp") is None else str(rel(d["isp"])),
            perturbation=pert,
            split=tuple(d.get("split", (782, 98))),
            output_dir=rel(d.get("output_dir", "out")),
            pixel_pitch_um=d.get("pixel_pitch_um", SYN_PIXEL_PITCH_UM),
            rays_per_bundle=int(d.get("rays_per_bundle", DEFAULT_RAYS)),
            kernel_size=int(d.get("kernel_size", DEFAULT_KERNEL_SIZE)),
            wavelengths=tuple(d.get("wavelengths", DEFAULT_WAVELENGTHS)),
            bit_depth=int(d.get("bit_depth", 8)),
            per_image_perturbation=bool(d.get("per_image_perturbation", False)),
            apply_offsets=bool(d.get("apply_offsets", True)),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed dataset config ({exc!r})") from exc


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    domain: str
    gt_path: str
    aberrated_path: str
    lens_hash: str
    isp_hash: str | None
    seed: int
    patch_size: int
    pipeline_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)


def split_counts(n: int, split) -> tuple[int, int]:
    """``(n_train, n_test)``: test share rounded down, but at least one test image when n >= 2."""
    train, test = split
    n_test = math.floor(n * test / (train + test) + 1e-9)
    if test > 0 and n >= 2:
        n_test = max(n_test, 1)
    n_test = min(n_test, n - 1) if n >= 2 else 0
    return n - n_test, n_test


def list_images(gt_dir) -> list[Path]:
    gt_dir = Path(gt_dir)
    if not gt_dir.is_dir():
        raise DataIOError(f"ground-truth directory not found: {gt_dir}")
    files = sorted(p for p in gt_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataIOError(f"no images in {gt_dir}")
    return files


def generate_dataset(config: DatasetConfig, output_dir=None, threads: int | None = None) -> list[ManifestRecord]:
    """Render every ground-truth image and write ``manifest.jsonl`` to the output directory."""
    set_threads(threads)
    out = Path(output_dir) if output_dir is not None else config.output_dir
    files = list_images(config.gt_dir)
    pert = config.perturbation
    root = pert.seed
    nominal = config.load_lens()
    real = config.mode == "real-sim"

    if real:
        isp_nominal = config.load_isp()
        isp_chain = perturb_isp(isp_nominal, pert.isp_range, derive_seed(root, "isp"))
        patch = pert.patch_size_target
        n_train, n_test = split_counts(len(files), config.split)
        order = np.random.default_rng(derive_seed(root, "split")).permutation(len(files))
        test_set = set(order[:n_test].tolist())
    else:
        isp_nominal = isp_chain = None
        patch = pert.patch_size_source
        test_set = set()

    def lens_for(index: int) -> LensPrescription:
        if not real:
            return nominal
        label_index = index if config.per_image_perturbation else 0
        lens = perturb_prescription(nominal, pert.lens_range, derive_seed(root, "lens", label_index))
        return lens.with_focus_shift(pert.focus_shift_mm)

    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "aberrated").mkdir(exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create output directory {out}: {exc}") from exc

    grids: dict = {}
    records = []
    for i, gt_path in enumerate(files):
        gt = read_image(gt_path)
        dims = gt.shape[:2]
        lens = lens_for(i)
        pitch = config.pitch_for(nominal, dims)
        key = (lens.digest(), dims)
        if key not in grids:
            grids[key] = build_psf_grid(
                lens, dims, patch, pitch, config.wavelengths, config.rays_per_bundle, config.kernel_size
            )
        seed = derive_seed(root, "noise", i) if real else root
        dcfg = DegradeConfig(
            patch_size=patch,
            apply_isp=real,
            noise_seed=seed if real else None,
            chain_isp=isp_chain,
            inverse_isp=isp_nominal,
            apply_offsets=config.apply_offsets,
        )
        img = simulate_aberrated(gt, grids[key], dcfg)
        domain = ("real-sim-test" if i in test_set else "real-sim-train") if real else "syn"
        rel_out = Path("aberrated") / f"{gt_path.stem}.png"
        write_image(out / rel_out, img, config.bit_depth)
        records.append(
            ManifestRecord(
                id=f"{config.mode}-{i:05d}",
                domain=domain,
                gt_path=str(gt_path),
                aberrated_path=rel_out.as_posix(),
                lens_hash=lens.digest(),
                isp_hash=isp_chain.digest() if real else None,
                seed=seed,
                patch_size=patch,
            )
        )
        log.info("%s -> %s (%s)", gt_path.name, rel_out, domain)

    try:
        with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(r.to_json() + "\n")
        if real:
            from .isp import save_isp
            from .optics import save_prescription

            save_prescription(lens_for(0), out / "lens_used.toml")
            save_isp(isp_chain, out / "isp_used.toml")
    except OSError as exc:
        raise DataIOError(str(exc)) from exc
    return records


def read_manifest(path) -> list[ManifestRecord]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataIOError(str(exc)) from exc
    return [ManifestRecord(**json.loads(line)) for line in lines if line.strip()]


def domain_gap(
    nominal: LensPrescription,
    image_dims,
    spec: PerturbationSpec,
    seeds,
    pixel_pitch: float = SYN_PIXEL_PITCH_UM,
    wavelengths=DEFAULT_WAVELENGTHS,
    rays_per_bundle: int = DEFAULT_RAYS,
    kernel_size: int = DEFAULT_KERNEL_SIZE,
    syn_grid: PsfGrid | None = None,
) -> float:
    """Mean PSF-grid distance between the Syn grid and Real-Sim grids over ``seeds``."""
    if syn_grid is None:
        syn_grid = build_psf_grid(nominal, image_dims, spec.patch_size_source, pixel_pitch,
                                  wavelengths, rays_per_bundle, kernel_size)
    dists = []
    for seed in seeds:
        lens = perturb_prescription(nominal, spec.lens_range, derive_seed(seed, "lens", 0))
        lens = lens.with_focus_shift(spec.focus_shift_mm)
        grid = build_psf_grid(lens, image_dims, spec.patch_size_target, pixel_pitch,
                              wavelengths, rays_per_bundle, kernel_size)
        dists.append(grid_distance(syn_grid, grid))
    return float(np.mean(dists))
