"""Forward numeric kernels for codebook quantization, affine feature modulation and the training losses.

Nothing here trains a network. Gradient conventions that a trainer has to
implement on top of these values:

* ``quantize`` is used with a straight-through estimator: the forward value
  is the selected codebook entry, the backward pass copies the gradient to
  the continuous feature.
* ``codebook_loss`` is ``||sg(f) - q||^2 + commit * ||f - sg(q)||^2``; in a
  forward-only setting both terms have the same value.

Feature maps are ``(h, w, n)`` arrays; codebooks are ``(K, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DEFAULT_CODEBOOK_SIZE = 1024
DEFAULT_FEATURE_DIM = 512
DEFAULT_COMMIT_WEIGHT = 0.25


@dataclass(frozen=True)
class LossWeights:
    per_vq: float = 1.0
    adv_vq: float = 0.1
    per_cac: float = 1.0
    adv_cac: float = 0.01
    s: float = 1.0
    s2t: float = 1.0
    t: float = 0.1
    fa: float = 0.01

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def quantize(features, codebook, chunk: int = 4096):
    """Replace every feature vector with its nearest codebook entry (Euclidean).

    Ties go to the lowest index. Returns ``(quantized, indices)`` with
    ``indices`` shaped like ``features`` minus the last axis.
    """
    f = np.asarray(features, dtype=float)
    z = np.asarray(codebook, dtype=float)
    if z.ndim != 2 or f.shape[-1] != z.shape[1]:
        raise ShapeError(f"feature dim {f.shape[-1]} does not match codebook {z.shape}")
    flat = f.reshape(-1, z.shape[1])
    idx = np.empty(len(flat), dtype=np.int64)
    # explicit differences rather than the |a|^2 - 2ab + |b|^2 expansion, which
    # loses precision exactly where near-ties need resolving
    step = max(1, chunk // max(1, len(z)))
    for s in range(0, len(flat), step):
        d = flat[s:s + step, None, :] - z[None, :, :]
        idx[s:s + step] = np.argmin(np.einsum("pkn,pkn->pk", d, d), axis=1)
    return z[idx].reshape(f.shape), idx.reshape(f.shape[:-1])


def codebook_loss(features, quantized, commit_weight: float = DEFAULT_COMMIT_WEIGHT) -> float:
    f, q = _pair(features, quantized)
    mse = float(np.mean((q - f) ** 2))
    return mse + commit_weight * mse


def affine_modulate(f, gamma=None, beta=None, quantized=None, mapping_weights=None):
    """``gamma * f + beta``.

    When ``mapping_weights`` is given, ``gamma`` and ``beta`` are computed from
    ``quantized`` by two per-position linear maps, i.e. 1x1 convolutions with
    no nonlinearity in between. ``mapping_weights`` is
    ``((W_gamma, b_gamma), (W_beta, b_beta))`` with ``W`` shaped
    ``(n_in, c_out)``.
    """
    f = np.asarray(f, dtype=float)
    if mapping_weights is not None:
        if quantized is None:
            raise ValueError("mapping_weights need the quantized feature")
        gamma, beta = modulation_maps(quantized, mapping_weights)
    if gamma is None or beta is None:
        raise ValueError("need gamma and beta, or mapping weights")
    gamma = np.asarray(gamma, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if gamma.shape != f.shape or beta.shape != f.shape:
        raise ShapeError(f"modulation maps {gamma.shape}/{beta.shape} do not match feature {f.shape}")
    return gamma * f + beta


def modulation_maps(quantized, mapping_weights):
    q = np.asarray(quantized, dtype=float)
    (wg, bg), (wb, bb) = mapping_weights
    wg, wb = np.asarray(wg, dtype=float), np.asarray(wb, dtype=float)
    if wg.shape[0] != q.shape[-1] or wb.shape[0] != q.shape[-1]:
        raise ShapeError("mapping weights do not match the quantized feature depth")
    return q @ wg + np.asarray(bg, dtype=float), q @ wb + np.asarray(bb, dtype=float)


def _sq_mean(x, target) -> float:
    return float(np.mean((np.asarray(x, dtype=float) - target) ** 2))


def lsgan_s2t_generator(d_src_recon, d_tgt_recon) -> float:
    """Both reconstructions pushed toward the discriminator's "real" label 1."""
    return _sq_mean(d_src_recon, 1.0) + _sq_mean(d_tgt_recon, 1.0)


def lsgan_s2t_discriminator(d_src_recon, d_tgt_recon, d_tgt_real) -> float:
    return _sq_mean(d_src_recon, 0.0) + _sq_mean(d_tgt_recon, 0.0) + _sq_mean(d_tgt_real, 1.0)


def lsgan_fa_generator(d_src_feat, d_tgt_feat, lambda_s: float = 1.0, lambda_t: float = 0.1) -> float:
    """Feature-alignment loss for the restoration network: both domains toward 0.5."""
    return lambda_s * _sq_mean(d_src_feat, 0.5) + lambda_t * _sq_mean(d_tgt_feat, 0.5)


def lsgan_fa_discriminator(d_tgt_feat, d_src_feat) -> float:
    return _sq_mean(d_tgt_feat, 0.0) + _sq_mean(d_src_feat, 1.0)


def hinge_adversarial(d_fake, d_real=None, role: str = "generator") -> float:
    d_fake = np.asarray(d_fake, dtype=float)
    if role == "generator":
        return float(-np.mean(d_fake))
    if role == "discriminator":
        if d_real is None:
            raise ValueError("discriminator hinge loss needs d_real")
        d_real = np.asarray(d_real, dtype=float)
        return float(np.mean(np.maximum(0.0, 1.0 - d_real)) + np.mean(np.maximum(0.0, 1.0 + d_fake)))
    raise ValueError(f"role must be 'generator' or 'discriminator', got {role!r}")


def l1_loss(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def null_perceptual(*_args) -> float:
    """Stand-in perceptual term for when no pretrained feature extractor is wired in."""
    return 0.0


def composite_vqgan_loss(l1, perceptual, adversarial, codebook, w: LossWeights = LossWeights()) -> float:
    return l1 + w.per_vq * perceptual + w.adv_vq * adversarial + codebook


def composite_cac_loss(l1, perceptual, adversarial, w: LossWeights = LossWeights()) -> float:
    return l1 + w.per_cac * perceptual + w.adv_cac * adversarial


def uda_total(l_cac_s, l_cac_s2t, l_fa, w: LossWeights = LossWeights()) -> float:
    return w.s * l_cac_s + w.s2t * l_cac_s2t + w.fa * l_fa
