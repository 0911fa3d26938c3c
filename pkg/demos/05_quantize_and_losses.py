"""
Codebook lookup, feature modulation and the training losses
===========================================================

Forward values only: nearest-neighbour quantization against a codebook,
the affine modulation driven by quantized features, and the adversarial
and composite loss terms a trainer would combine.
"""

import numpy as np

from aberrsim import qdmr
from aberrsim.qdmr import LossWeights

rng = np.random.default_rng(1)
codebook = rng.normal(size=(64, 16))
features = rng.normal(size=(8, 8, 16))

quantized, idx = qdmr.quantize(features, codebook)
print("codebook entries used:", len(np.unique(idx)), "of", len(codebook))
print("codebook loss:", round(qdmr.codebook_loss(features, quantized), 4))

# Two per-position linear maps turn the quantized feature into (gamma, beta).
w_gamma = rng.normal(scale=0.1, size=(16, 16))
w_beta = rng.normal(scale=0.1, size=(16, 16))
modulated = qdmr.affine_modulate(
    features, quantized=quantized, mapping_weights=((w_gamma, np.ones(16)), (w_beta, np.zeros(16)))
)
print("mean |modulated - features|:", round(float(np.abs(modulated - features).mean()), 4))

# Discriminator outputs for source / target reconstructions and features.
d_src, d_tgt, d_real = rng.uniform(0, 1, (3, 4, 4))
w = LossWeights()
l_s2t = qdmr.lsgan_s2t_generator(d_src, d_tgt)
l_fa = qdmr.lsgan_fa_generator(d_src, d_tgt, w.s, w.t)
l_cac = qdmr.composite_cac_loss(qdmr.l1_loss(features, modulated), qdmr.null_perceptual(), qdmr.hinge_adversarial(d_src))
print(f"s2t generator {l_s2t:.4f}, feature alignment {l_fa:.4f}, CAC {l_cac:.4f}")
print("total:", round(qdmr.uda_total(l_cac, l_s2t, l_fa, w), 4))
print("source-only total:", qdmr.uda_total(l_cac, l_s2t, l_fa, LossWeights(s2t=0, fa=0)))
