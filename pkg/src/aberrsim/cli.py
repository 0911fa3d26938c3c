"""``aberrsim`` command line: PSF stacks, degradation, perturbation, datasets, metrics, VQ kernels.

JSON results go to stdout, logs to stderr. Exit codes: 0 ok, 2 bad
configuration, 3 geometry failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AberrSimError, ConfigError, DataIOError

log = logging.getLogger("aberrsim")


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("dimensions must be positive")
    return h, w


def _finite(value):
    """JSON-safe float: infinities become the strings "inf" / "-inf"."""
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _emit(obj) -> None:
    def clean(o):
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return _finite(o)

    json.dump(clean(obj), sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _lens(arg: str):
    from .optics import load_prescription, reference_lens

    path = Path(arg)
    if path.suffix == ".toml" or path.exists():
        return load_prescription(path)
    return reference_lens(arg)


def cmd_psf(args) -> int:
    from .io import save_psf_grid
    from .psf import build_psf_grid

    lens = _lens(args.lens)
    grid = build_psf_grid(
        lens,
        args.dims,
        args.patch,
        pixel_pitch=args.pitch_um,
        rays_per_bundle=args.rays,
        kernel_size=args.kernel,
    )
    save_psf_grid(grid, args.out)
    gh, gw = grid.grid_shape
    _emit({
        "out": str(args.out),
        "grid": [gh, gw, len(grid.wavelengths)],
        "kernel": grid.kernel_size,
        "lens_hash": lens.digest(),
        "out_of_field": int(np.count_nonzero(grid.out_of_field)),
        "max_clipped_fraction": float(np.max(grid.clipped)),
    })
    return 0


def cmd_degrade(args) -> int:
    from .degrade import DegradeConfig, simulate_aberrated
    from .io import load_psf_grid, read_image, write_image
    from .isp import load_isp

    img = read_image(args.input)
    grid = load_psf_grid(args.psf)
    if args.patch != grid.patch_size:
        raise ConfigError(f"--patch {args.patch} does not match the PSF stack's {grid.patch_size}")
    isp = load_isp(args.isp) if args.isp else None
    if args.noise_seed is not None and isp is None:
        raise ConfigError("--noise-seed needs --isp")
    cfg = DegradeConfig(
        patch_size=args.patch,
        apply_isp=isp is not None,
        noise_seed=args.noise_seed,
        chain_isp=isp,
        apply_offsets=not args.no_offsets,
    )
    out = simulate_aberrated(img, grid, cfg)
    write_image(args.out, out, args.bit_depth)
    _emit({"out": str(args.out), "shape": list(out.shape)})
    return 0


def cmd_perturb(args) -> int:
    from .datagen import perturb_isp, perturb_prescription
    from .isp import load_isp, save_isp
    from .optics import load_prescription, save_prescription

    if (args.lens is None) == (args.isp is None):
        raise ConfigError("give exactly one of --lens or --isp")
    seed = args.seed if args.seed is not None else 0
    if args.lens is not None:
        lens = perturb_prescription(load_prescription(args.lens), args.range, seed)
        save_prescription(lens, args.out)
        digest = lens.digest()
    else:
        isp = perturb_isp(load_isp(args.isp), args.range, seed)
        save_isp(isp, args.out)
        digest = isp.digest()
    _emit({"out": str(args.out), "range": args.range, "seed": seed, "hash": digest})
    return 0


def cmd_dataset(args) -> int:
    from dataclasses import replace

    from .datagen import generate_dataset, load_dataset_config

    cfg = load_dataset_config(args.config)
    if args.seed is not None:
        cfg.perturbation = replace(cfg.perturbation, seed=args.seed)
    out = Path(args.out) if args.out else cfg.output_dir
    records = generate_dataset(cfg, out, threads=args.threads)
    counts: dict = {}
    for r in records:
        counts[r.domain] = counts.get(r.domain, 0) + 1
    _emit({"manifest": str(out / "manifest.jsonl"), "records": len(records), "domains": counts})
    return 0


def cmd_metrics(args) -> int:
    from .io import read_image
    from .metrics import metric_report

    if len(args.ref) != len(args.test):
        raise ConfigError("--ref and --test need the same number of images")
    pairs = ((str(t), read_image(r), read_image(t)) for r, t in zip(args.ref, args.test))
    _emit(metric_report(pairs))
    return 0


LOSS_ARITY = {
    "codebook": 2,
    "l1": 2,
    "lsgan-s2t-g": 2,
    "lsgan-s2t-d": 3,
    "lsgan-fa-g": 2,
    "lsgan-fa-d": 2,
    "hinge-g": 1,
    "hinge-d": 2,
}


def cmd_vq(args) -> int:
    from . import qdmr
    from .io import load_tensor, save_tensor

    if args.op == "quantize":
        feats, _ = load_tensor(args.features)
        book, _ = load_tensor(args.codebook)
        q, idx = qdmr.quantize(feats, book)
        if args.out:
            save_tensor(args.out, q, role="quantized")
        _emit({"indices": idx.tolist(), "shape": list(idx.shape)})
        return 0

    arrays = [load_tensor(p)[0] for p in args.inputs]
    need = LOSS_ARITY[args.kind]
    if len(arrays) != need:
        raise ConfigError(f"loss {args.kind} takes {need} input tensors, got {len(arrays)}")
    fn = {
        "codebook": lambda a, b: qdmr.codebook_loss(a, b, args.commit),
        "l1": qdmr.l1_loss,
        "lsgan-s2t-g": qdmr.lsgan_s2t_generator,
        "lsgan-s2t-d": qdmr.lsgan_s2t_discriminator,
        "lsgan-fa-g": lambda s, t: qdmr.lsgan_fa_generator(s, t, args.lambda_s, args.lambda_t),
        "lsgan-fa-d": qdmr.lsgan_fa_discriminator,
        "hinge-g": lambda f: qdmr.hinge_adversarial(f, role="generator"),
        "hinge-d": lambda f, r: qdmr.hinge_adversarial(f, r, role="discriminator"),
    }[args.kind]
    _emit({"kind": args.kind, "loss": fn(*arrays)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root random seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker thread cap")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="aberrsim", parents=[common], description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("psf", parents=[common], help="trace a patch-wise PSF stack")
    p.add_argument("--lens", required=True, help="prescription TOML or bundled lens name")
    p.add_argument("--dims", required=True, type=_dims, help="image size HxW")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--pitch-um", type=float, default=11.43)
    p.add_argument("--rays", type=int, default=1024)
    p.add_argument("--kernel", type=int, default=25)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("degrade", parents=[common], help="blur an image with a PSF stack")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--psf", required=True, type=Path)
    p.add_argument("--patch", type=int, required=True)
    p.add_argument("--isp", type=Path, help="run the blur in raw space with these ISP parameters")
    p.add_argument("--noise-seed", type=int)
    p.add_argument("--no-offsets", action="store_true", help="ignore per-patch centre offsets")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("perturb", parents=[common], help="jitter a lens or ISP config")
    p.add_argument("--lens", type=Path)
    p.add_argument("--isp", type=Path)
    p.add_argument("--range", type=float, required=True)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("dataset", parents=[common], help="generate a Syn or Real-Sim dataset")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("metrics", parents=[common], help="PSNR and SSIM of image pairs")
    p.add_argument("--ref", required=True, nargs="+", type=Path)
    p.add_argument("--test", required=True, nargs="+", type=Path)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("vq", parents=[common], help="quantizer and loss kernels on tensor files")
    vq = p.add_subparsers(dest="op", required=True)
    q = vq.add_parser("quantize", parents=[common])
    q.add_argument("--features", required=True, type=Path)
    q.add_argument("--codebook", required=True, type=Path)
    q.add_argument("--out", type=Path, help="write the quantized tensor here")
    q.set_defaults(func=cmd_vq)
    q = vq.add_parser("loss", parents=[common])
    q.add_argument("--kind", required=True, choices=sorted(LOSS_ARITY))
    q.add_argument("--inputs", required=True, nargs="+", type=Path)
    q.add_argument("--commit", type=float, default=0.25)
    q.add_argument("--lambda-s", type=float, default=1.0)
    q.add_argument("--lambda-t", type=float, default=0.1)
    q.set_defaults(func=cmd_vq)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("threads", None), ("verbose", 0)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    from ._parallel import set_threads

    set_threads(args.threads)
    try:
        return args.func(args)
    except AberrSimError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return DataIOError.exit_code
    except (KeyError, TypeError, ValueError) as exc:
        log.error("invalid configuration: %s", exc)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
