import json
import math

import numpy as np
import pytest
from scipy import stats

from aberrsim.datagen import (
    DatasetConfig,
    PerturbationSpec,
    derive_seed,
    domain_gap,
    generate_dataset,
    isp_factors,
    lens_factors,
    load_dataset_config,
    perturb_isp,
    perturb_prescription,
    read_manifest,
    split_counts,
)
from aberrsim.errors import ConfigError, DataIOError, PerturbationError
from aberrsim.io import read_image, write_image
from aberrsim.isp import IspParams, default_isp
from aberrsim.optics import LensPrescription, Surface


@pytest.fixture
def gt_dir(tmp_path, rng):
    d = tmp_path / "gt"
    for i in range(3):
        write_image(d / f"img{i}.png", rng.random((32, 48, 3)))
    return d


def small_config(gt_dir, out, **kw):
    base = dict(gt_dir=gt_dir, output_dir=out, pixel_pitch_um="auto", rays_per_bundle=64, kernel_size=9)
    base.update(kw)
    return DatasetConfig(**base)


class TestSeeds:
    def test_stable_and_distinct(self):
        assert derive_seed(1, "lens", 0) == derive_seed(1, "lens", 0)
        assert len({derive_seed(1, "lens", 0), derive_seed(1, "lens", 1), derive_seed(1, "isp", 0),
                    derive_seed(2, "lens", 0)}) == 4
        assert 0 <= derive_seed(123, "x") < 2**64


class TestSpec:
    def test_validation(self):
        with pytest.raises(ConfigError):
            PerturbationSpec(lens_range=0.3)
        with pytest.raises(ConfigError):
            PerturbationSpec(isp_range=-0.01)
        with pytest.raises(ConfigError):
            PerturbationSpec(patch_size_target=6)
        s = PerturbationSpec()
        assert (s.lens_range, s.isp_range, s.patch_size_target, s.patch_size_source) == (0.05, 0.02, 8, 16)


class TestPerturbLens:
    def test_zero_range(self, mos_s1):
        assert perturb_prescription(mos_s1, 0.0, 5) == mos_s1

    def test_same_seed(self, mos_s1):
        assert perturb_prescription(mos_s1, 0.05, 5) == perturb_prescription(mos_s1, 0.05, 5)
        assert perturb_prescription(mos_s1, 0.05, 5) != perturb_prescription(mos_s1, 0.05, 6)

    def test_fixed_fields(self, mos_s1):
        p = perturb_prescription(mos_s1, 0.05, 11)
        assert p.max_half_fov_deg == mos_s1.max_half_fov_deg
        assert p.aperture_radius_mm == mos_s1.aperture_radius_mm
        assert p.image_distance_mm == mos_s1.image_distance_mm
        assert [s.semi_diameter for s in p.surfaces] == [s.semi_diameter for s in mos_s1.surfaces]
        assert p.surfaces[-1].n_d is None

    def test_factors_applied(self, mos_s1):
        f = lens_factors(2, 0.05, 11)
        p = perturb_prescription(mos_s1, 0.05, 11)
        s0, q0 = mos_s1.surfaces[0], p.surfaces[0]
        assert q0.curvature == s0.curvature * f[0, 0]
        assert q0.thickness_after == s0.thickness_after * f[0, 1]
        assert q0.n_d == s0.n_d * f[0, 2] and q0.abbe == s0.abbe * f[0, 3]

    def test_factor_distribution_uniform(self, mos_s1):
        ratios = np.array(
            [perturb_prescription(mos_s1, 0.05, s).surfaces[0].curvature for s in range(10_000)]
        ) / mos_s1.surfaces[0].curvature
        assert ratios.min() >= 0.95 and ratios.max() <= 1.05
        assert stats.kstest(ratios, stats.uniform(loc=0.95, scale=0.1).cdf).statistic < 0.02

    def test_independent_parameters(self):
        f = lens_factors(2500, 0.05, 3).reshape(-1, 4)
        corr = np.corrcoef(f.T)
        assert np.abs(corr - np.eye(4)).max() < 0.05

    def test_untraceable_raises(self, monkeypatch, mos_s1):
        import aberrsim.datagen as dg
        from aberrsim.errors import GeometryError

        def afocal(_p, *_a):
            raise GeometryError("afocal")

        monkeypatch.setattr(dg, "paraxial_trace", afocal)
        with pytest.raises(PerturbationError):
            perturb_prescription(mos_s1, 0.05, 0)

    def test_retry_recovers(self, monkeypatch, mos_s1):
        import aberrsim.datagen as dg
        from aberrsim.errors import GeometryError

        calls = []
        real = dg.paraxial_trace

        def flaky(p, *a):
            calls.append(p)
            if len(calls) < 3:
                raise GeometryError("afocal")
            return real(p, *a)

        monkeypatch.setattr(dg, "paraxial_trace", flaky)
        out = perturb_prescription(mos_s1, 0.05, 0)
        monkeypatch.setattr(dg, "paraxial_trace", real)
        assert len(calls) == 3
        assert out == dg._apply_lens_factors(mos_s1, lens_factors(2, 0.05, derive_seed(0, "retry", 2)))

    def test_range_cap(self, mos_s1):
        with pytest.raises(ConfigError):
            perturb_prescription(mos_s1, 0.25, 0)


class TestPerturbIsp:
    def test_zero_and_seed(self):
        p = default_isp()
        assert perturb_isp(p, 0.0, 1) == p
        assert perturb_isp(p, 0.02, 1) == perturb_isp(p, 0.02, 1)

    def test_multiplier_bounds(self):
        for seed in range(500):
            f = isp_factors(0.02, seed)
            assert f.min() >= 0.98 and f.max() <= 1.02

    def test_applied(self):
        p = IspParams(wb_gains=(2, 1, 1.8), ccm=((0.8, 0.1, 0.1), (0.1, 0.8, 0.1), (0.1, 0.1, 0.8)), gamma=2.2)
        q = perturb_isp(p, 0.02, 9)
        f = isp_factors(0.02, 9)
        assert np.allclose(q.wb_gains, np.array(p.wb_gains) * f[:3])
        assert q.gamma == pytest.approx(2.2 * f[12])
        assert np.allclose(q.ccm_matrix.sum(axis=1), 1.0)
        raw = p.ccm_matrix * f[3:12].reshape(3, 3)
        assert np.allclose(q.ccm_matrix, raw / raw.sum(axis=1, keepdims=True))
        assert (q.shot_gain, q.read_var) == (p.shot_gain, p.read_var)


class TestSplit:
    @pytest.mark.parametrize("n,split,expect", [(880, (782, 98), (782, 98)), (11, (10, 1), (10, 1)),
                                                (3, (10, 1), (2, 1)), (1, (10, 1), (1, 0)), (20, (1, 0), (20, 0))])
    def test_counts(self, n, split, expect):
        assert split_counts(n, split) == expect


class TestGenerate:
    def test_syn(self, gt_dir, tmp_path):
        recs = generate_dataset(small_config(gt_dir, tmp_path / "out"))
        assert len(recs) == 3
        assert all(r.domain == "syn" and r.patch_size == 16 and r.isp_hash is None for r in recs)
        back = read_manifest(tmp_path / "out" / "manifest.jsonl")
        assert back == recs
        for r in recs:
            img = read_image(tmp_path / "out" / r.aberrated_path)
            assert img.shape == (32, 48, 3)

    def test_real_sim_split_and_determinism(self, tmp_path, rng):
        gt = tmp_path / "gt11"
        for i in range(11):
            write_image(gt / f"{i:02d}.png", rng.random((16, 16, 3)))
        cfg = small_config(gt, tmp_path / "a", mode="real-sim", split=(10, 1),
                           perturbation=PerturbationSpec(seed=3, focus_shift_mm=0.02))
        recs = generate_dataset(cfg)
        domains = [r.domain for r in recs]
        assert domains.count("real-sim-train") == 10 and domains.count("real-sim-test") == 1
        train = {r.gt_path for r in recs if r.domain == "real-sim-train"}
        test = {r.gt_path for r in recs if r.domain == "real-sim-test"}
        assert not train & test
        assert all(r.patch_size == 8 and r.isp_hash for r in recs)
        assert len({r.lens_hash for r in recs}) == 1
        generate_dataset(cfg, tmp_path / "b")
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        for r in recs:
            assert (a / r.aberrated_path).read_bytes() == (b / r.aberrated_path).read_bytes()

    def test_per_image_lenses(self, gt_dir, tmp_path):
        cfg = small_config(gt_dir, tmp_path / "o", mode="real-sim", per_image_perturbation=True)
        assert len({r.lens_hash for r in generate_dataset(cfg)}) == 3

    def test_syn_and_real_differ(self, gt_dir, tmp_path):
        syn = generate_dataset(small_config(gt_dir, tmp_path / "s"))
        real = generate_dataset(small_config(gt_dir, tmp_path / "r", mode="real-sim"))
        a = read_image(tmp_path / "s" / syn[0].aberrated_path)
        b = read_image(tmp_path / "r" / real[0].aberrated_path)
        assert np.abs(a - b).mean() > 0

    def test_errors(self, tmp_path):
        with pytest.raises(DataIOError):
            generate_dataset(small_config(tmp_path / "nope", tmp_path / "o"))
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataIOError):
            generate_dataset(small_config(tmp_path / "empty", tmp_path / "o"))
        with pytest.raises(ConfigError):
            DatasetConfig(gt_dir=tmp_path, mode="other")

    def test_unwritable_output(self, gt_dir, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataIOError):
            generate_dataset(small_config(gt_dir, blocker / "out"))

    def test_config_file(self, gt_dir, tmp_path):
        (tmp_path / "cfg.toml").write_text(
            'gt_dir = "gt"\nmode = "real-sim"\nsplit = [4, 1]\n'
            "[perturbation]\nlens_range = 0.025\nseed = 9\n"
        )
        cfg = load_dataset_config(tmp_path / "cfg.toml")
        assert cfg.gt_dir == gt_dir and cfg.perturbation.lens_range == 0.025 and cfg.split == (4, 1)
        (tmp_path / "bad.toml").write_text("mode = 'syn'\n")
        with pytest.raises(ConfigError):
            load_dataset_config(tmp_path / "bad.toml")
        with pytest.raises(DataIOError):
            load_dataset_config(tmp_path / "missing.toml")

    def test_auto_pitch_maps_corner_to_half_field(self, mos_s1):
        from aberrsim.optics import paraxial_trace

        cfg = DatasetConfig(gt_dir=".", pixel_pitch_um="auto")
        pitch = cfg.pitch_for(mos_s1, (1024, 2048))
        corner_mm = math.hypot(512, 1024) * pitch * 1e-3
        assert math.atan(corner_mm / paraxial_trace(mos_s1).efl) == pytest.approx(mos_s1.max_half_fov)


def test_domain_gap_grows_with_range(mos_s1):
    from aberrsim.psf import build_psf_grid

    # pixels must resolve the ~80 um spots for kernel shape changes to show up
    dims, pitch = (128, 256), 8 * 11.43
    syn = build_psf_grid(mos_s1, dims, 16, pitch, rays_per_bundle=256)
    gaps = [
        domain_gap(mos_s1, dims, PerturbationSpec(lens_range=r), range(5), pitch, rays_per_bundle=256, syn_grid=syn)
        for r in (0.0, 0.05)
    ]
    assert 0 < gaps[0] < gaps[1]
