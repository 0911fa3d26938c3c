import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aberrsim import qdmr
from aberrsim.errors import ShapeError
from aberrsim.qdmr import LossWeights


def brute_indices(features, codebook):
    flat = features.reshape(-1, features.shape[-1])
    out = []
    for f in flat:
        d = [float(np.sum((f - z) ** 2)) for z in codebook]
        out.append(min(range(len(d)), key=lambda k: (d[k], k)))
    return np.array(out).reshape(features.shape[:-1])


class TestQuantize:
    def test_fixed_point(self, rng):
        book = rng.normal(size=(16, 4))
        f = np.broadcast_to(book[7], (2, 3, 4))
        q, idx = qdmr.quantize(f, book)
        assert (idx == 7).all() and np.array_equal(q, f)

    def test_two_entry_example(self):
        q, idx = qdmr.quantize(np.array([[[0.9, 0.8]]]), np.array([[0.0, 0.0], [1.0, 1.0]]))
        assert idx[0, 0] == 1 and np.array_equal(q[0, 0], [1.0, 1.0])

    def test_brute_force(self, rng):
        f = rng.normal(size=(8, 8, 4))
        book = rng.normal(size=(16, 4))
        assert np.array_equal(qdmr.quantize(f, book)[1], brute_indices(f, book))

    def test_ties_go_to_lowest_index(self):
        book = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        _, idx = qdmr.quantize(np.array([[[0.0, 0.0], [1.0, 0.0]]]), book)
        assert idx.tolist() == [[0, 0]]

    def test_idempotent_and_optimal(self, rng):
        f = rng.normal(size=(5, 6, 3))
        book = rng.normal(size=(64, 3))
        q, idx = qdmr.quantize(f, book)
        q2, idx2 = qdmr.quantize(q, book)
        assert np.array_equal(q, q2) and np.array_equal(idx, idx2)
        d_all = ((f[..., None, :] - book) ** 2).sum(-1)
        assert (np.take_along_axis(d_all, idx[..., None], -1)[..., 0] <= d_all.min(-1)).all()

    def test_permutation_invariance(self, rng):
        f = rng.normal(size=(4, 4, 3))
        book = rng.normal(size=(20, 3))
        perm = rng.permutation(20)
        q1, i1 = qdmr.quantize(f, book)
        q2, i2 = qdmr.quantize(f, book[perm])
        assert np.array_equal(q1, q2) and np.array_equal(perm[i2], i1)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            qdmr.quantize(np.zeros((2, 2, 3)), np.zeros((4, 5)))

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.just(3)), elements=st.floats(-4, 4)),
        arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)), elements=st.floats(-4, 4)),
    )
    def test_property_brute_force(self, f, book):
        assert np.array_equal(qdmr.quantize(f, book)[1], brute_indices(f, book))


class TestCodebookLoss:
    def test_values(self):
        f = np.zeros((2, 2, 3))
        assert qdmr.codebook_loss(f, f) == 0
        assert qdmr.codebook_loss(f, np.ones_like(f), 0.25) == pytest.approx(1.25, abs=1e-12)

    def test_quadratic(self, rng):
        f = rng.normal(size=(3, 3, 2))
        q = rng.normal(size=(3, 3, 2))
        assert qdmr.codebook_loss(f, f + 2 * (q - f)) == pytest.approx(4 * qdmr.codebook_loss(f, q), rel=1e-12)


class TestModulation:
    def test_identity_and_constant(self, rng):
        f = rng.normal(size=(3, 4, 5))
        assert np.array_equal(qdmr.affine_modulate(f, np.ones_like(f), np.zeros_like(f)), f)
        assert np.all(qdmr.affine_modulate(f, np.zeros_like(f), np.full_like(f, 0.7)) == 0.7)

    def test_elementwise_oracle(self, rng):
        f, a, b = rng.normal(size=(3, 2, 3, 4))
        out = qdmr.affine_modulate(f, a, b)
        for idx in itertools.product(range(2), range(3), range(4)):
            assert out[idx] == a[idx] * f[idx] + b[idx]

    def test_mapping_weights(self, rng):
        f = rng.normal(size=(2, 3, 4))
        q = rng.normal(size=(2, 3, 6))
        wg, wb = rng.normal(size=(2, 6, 4))
        bg, bb = rng.normal(size=(2, 4))
        out = qdmr.affine_modulate(f, quantized=q, mapping_weights=((wg, bg), (wb, bb)))
        i, j = 1, 2
        gamma = q[i, j] @ wg + bg
        beta = q[i, j] @ wb + bb
        assert np.allclose(out[i, j], gamma * f[i, j] + beta)

    def test_errors(self, rng):
        f = rng.normal(size=(2, 2, 3))
        with pytest.raises(ShapeError):
            qdmr.affine_modulate(f, np.ones((2, 2, 4)), np.zeros((2, 2, 4)))
        with pytest.raises(ValueError):
            qdmr.affine_modulate(f)


class TestAdversarial:
    def test_s2t_generator(self):
        assert qdmr.lsgan_s2t_generator(np.ones(4), np.ones(4)) == 0
        assert qdmr.lsgan_s2t_generator(np.zeros(4), np.zeros(4)) == 2
        assert qdmr.lsgan_s2t_generator(np.full(4, 0.5), np.ones(4)) == 0.25

    def test_s2t_discriminator(self):
        assert qdmr.lsgan_s2t_discriminator(np.zeros(3), np.zeros(3), np.ones(3)) == 0
        assert qdmr.lsgan_s2t_discriminator(*[np.full(3, 0.5)] * 3) == pytest.approx(0.75)
        assert qdmr.lsgan_s2t_discriminator(*[np.ones(3)] * 3) == 2

    def test_fa_generator(self):
        assert qdmr.lsgan_fa_generator(np.full(3, 0.5), np.full(3, 0.5)) == 0
        assert qdmr.lsgan_fa_generator(np.ones(3), np.zeros(3), 1.0, 0.1) == pytest.approx(0.275, abs=1e-12)
        a = qdmr.lsgan_fa_generator(np.full(3, 0.9), np.full(3, 0.2), 1.0, 0.1)
        assert qdmr.lsgan_fa_generator(np.full(3, 0.9), np.full(3, 0.2), 2.0, 0.2) == pytest.approx(2 * a)

    def test_fa_discriminator(self):
        assert qdmr.lsgan_fa_discriminator(np.zeros(3), np.ones(3)) == 0
        assert qdmr.lsgan_fa_discriminator(np.full(3, 0.5), np.full(3, 0.5)) == 0.5
        assert qdmr.lsgan_fa_discriminator(np.ones(3), np.ones(3)) == 1

    def test_hinge(self):
        assert qdmr.hinge_adversarial(np.zeros(4)) == 0
        assert qdmr.hinge_adversarial(np.full(4, -1.0), np.ones(4), role="discriminator") == 0
        assert qdmr.hinge_adversarial(np.zeros(4), np.zeros(4), role="discriminator") == 2
        with pytest.raises(ValueError):
            qdmr.hinge_adversarial(np.zeros(4), role="critic")
        with pytest.raises(ValueError):
            qdmr.hinge_adversarial(np.zeros(4), role="discriminator")

    @pytest.mark.parametrize(
        "fn,target",
        [
            (lambda x: qdmr.lsgan_s2t_generator(x, np.ones(1)), 1.0),
            (lambda x: qdmr.lsgan_s2t_discriminator(x, np.zeros(1), np.ones(1)), 0.0),
            (lambda x: qdmr.lsgan_fa_generator(x, np.full(1, 0.5)), 0.5),
            (lambda x: qdmr.lsgan_fa_discriminator(np.zeros(1), x), 1.0),
        ],
    )
    def test_quadratic_derivative(self, fn, target):
        for x0 in (-0.7, 0.2, 1.3):
            h = 1e-6
            fd = (fn(np.array([x0 + h])) - fn(np.array([x0 - h]))) / (2 * h)
            assert fd == pytest.approx(2 * (x0 - target), abs=1e-6)
            assert fn(np.array([x0])) >= 0
        assert fn(np.array([target])) == 0


class TestComposites:
    def test_vqgan(self):
        assert qdmr.composite_vqgan_loss(0, 0, 0, 0) == 0
        assert qdmr.composite_vqgan_loss(0.1, 0.2, 0.3, 0.05) == pytest.approx(0.38, abs=1e-12)

    def test_cac(self):
        assert qdmr.composite_cac_loss(0, 0, 0) == 0
        assert qdmr.composite_cac_loss(0.1, 0.2, 0.3) == pytest.approx(0.303, abs=1e-12)

    def test_uda(self):
        assert qdmr.uda_total(0, 0, 0) == 0
        assert qdmr.uda_total(0.5, 0.3, 2.0) == pytest.approx(0.82, abs=1e-12)
        w = LossWeights(s2t=0, fa=0)
        assert qdmr.uda_total(0.5, 0.3, 2.0, w) == 0.5

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
    def test_linear(self, a, b, c, k):
        base = qdmr.uda_total(a, b, c)
        assert qdmr.uda_total(a + k, b, c) - base == pytest.approx(k, abs=1e-9)
        assert qdmr.composite_cac_loss(a, b, c + k) >= qdmr.composite_cac_loss(a, b, c)

    def test_weights(self):
        w = LossWeights()
        assert (w.per_vq, w.adv_vq, w.per_cac, w.adv_cac, w.s, w.s2t, w.t, w.fa) == (1, 0.1, 1, 0.01, 1, 1, 0.1, 0.01)
        with pytest.raises(ValueError):
            LossWeights(fa=-1)

    def test_l1(self, rng):
        a, b = rng.normal(size=(2, 4, 5))
        assert qdmr.l1_loss(a, a) == 0
        assert qdmr.l1_loss(np.zeros(3), np.ones(3)) == 1
        assert qdmr.l1_loss(a, b) == pytest.approx(sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size)
        assert qdmr.null_perceptual(a, b) == 0.0
