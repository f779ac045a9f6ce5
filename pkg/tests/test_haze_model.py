import math
import os

import numpy as np
import pytest

from gridhaze import haze_model as hm
from gridhaze.errors import InputError, ParameterError


class TestTransmission:
    def test_zero_depth_gives_unit_transmission(self):
        d = hm.DepthMap(np.zeros((8, 8)))
        t = hm.transmission(d, beta=2.7)
        assert np.all(t == 1.0)

    def test_scalar_math_oracle(self):
        # independent oracle: the scalar exponential
        d = hm.DepthMap(np.ones((8, 8)))
        t = hm.transmission(d, beta=0.693147)
        assert np.allclose(t, math.exp(-0.693147), rtol=0, atol=1e-15)

    def test_monotone_decreasing_in_depth(self):
        d = hm.DepthMap(np.array([[0.0, 1.0, 2.0]] * 8 + [[0.0, 0.5, 3.0]] * 0, dtype=float).reshape(8, 3).repeat(3, axis=1)[:, :8])
        t = hm.transmission(d, beta=1.0)
        assert np.allclose(t[0, 0], 1.0)
        # strictly decreasing along increasing depth
        row = hm.transmission(hm.DepthMap(np.tile(np.arange(8.0), (8, 1))), 1.0)[0]
        assert np.all(np.diff(row) < 0)

    def test_monotonicity_between_grids(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            d1 = rng.uniform(0, 5, (8, 8))
            d2 = d1 + rng.uniform(0, 2, (8, 8))
            beta = rng.uniform(0.2, 2.0)
            t1 = hm.transmission(hm.DepthMap(d1), beta)
            t2 = hm.transmission(hm.DepthMap(d2), beta)
            assert np.all(t1 >= t2)

    def test_bad_beta_rejected(self):
        with pytest.raises(ParameterError):
            hm.transmission(hm.DepthMap(np.zeros((8, 8))), beta=0.0)
        with pytest.raises(ParameterError):
            hm.transmission(hm.DepthMap(np.zeros((8, 8))), beta=-1.0)

    def test_nonfinite_depth_rejected(self):
        with pytest.raises(InputError):
            hm.DepthMap(np.full((8, 8), np.nan))


class TestApplyInvert:
    def test_unit_transmission_is_identity(self):
        rng = np.random.default_rng(1)
        j = rng.random((3, 8, 8))
        assert np.array_equal(hm.apply_asm(j, np.ones((8, 8)), 0.9), j)

    def test_pointwise_arithmetic(self):
        j = np.full((3, 8, 8), 0.2)
        t = np.full((8, 8), 0.5)
        out = hm.apply_asm(j, t, 1.0)
        assert np.allclose(out, 0.6, rtol=0, atol=1e-15)

    def test_zero_transmission_limit_is_airlight(self):
        rng = np.random.default_rng(2)
        j = rng.random((3, 8, 8))
        out = hm.apply_asm(j, np.full((8, 8), 1e-12), 0.8)
        assert np.allclose(out, 0.8, atol=1e-10)

    def test_convexity_between_clear_and_airlight(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            j = rng.random((3, 8, 8))
            t = rng.uniform(0.01, 1.0, (8, 8))
            a = rng.uniform(0.5, 1.0)
            i = hm.apply_asm(j, t, a)
            assert np.all(i >= np.minimum(j, a) - 1e-12)
            assert np.all(i <= np.maximum(j, a) + 1e-12)

    def test_airlight_fixed_point(self):
        a = 0.77
        i = np.full((3, 8, 8), a)
        t = np.full((8, 8), 0.3)
        out = hm.invert_asm(i, t, a, t_min=0.05)
        assert np.allclose(out, a, rtol=0, atol=1e-12)

    def test_round_trip_100_seeds(self):
        # brute-force round-trip harness over randomized scenes
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            j = rng.random((3, 16, 16))
            beta = rng.uniform(0.4, 1.6)
            a = rng.uniform(0.7, 1.0)
            depth = hm.synth_depth("smooth_noise", 16, 16, seed=seed)
            t = hm.transmission(depth, beta)
            back = hm.invert_asm(hm.apply_asm(j, t, a), t, a, t_min=float(t.min()))
            worst = max(worst, float(np.abs(back - j).max()))
        assert worst < 1e-6

    def test_t_min_validated(self):
        i = np.zeros((3, 8, 8))
        with pytest.raises(ParameterError):
            hm.invert_asm(i, np.ones((8, 8)), 0.8, t_min=0.0)
        with pytest.raises(ParameterError):
            hm.invert_asm(i, np.ones((8, 8)), 0.8, t_min=1.5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            hm.apply_asm(np.zeros((3, 8, 8)), np.ones((4, 4)), 0.9)


class TestSynthDepth:
    def test_linear_ramp_rows(self):
        d = hm.synth_depth("linear_ramp", 8, 8, seed=123)
        # row-constant, 0 at the top, d_max at the bottom
        assert np.allclose(d.values[0], 0.0)
        assert np.allclose(d.values[-1], hm.DEFAULT_D_MAX)
        assert np.all(d.values == d.values[:, :1])

    def test_deterministic_per_kind_and_seed(self):
        for kind in hm.DEPTH_KINDS:
            a = hm.synth_depth(kind, 16, 16, seed=5)
            b = hm.synth_depth(kind, 16, 16, seed=5)
            assert np.array_equal(a.values, b.values)

    def test_seed_sensitivity(self):
        a = hm.synth_depth("smooth_noise", 64, 64, seed=1)
        b = hm.synth_depth("smooth_noise", 64, 64, seed=2)
        assert not np.array_equal(a.values, b.values)

    def test_bounds(self):
        d = hm.synth_depth("radial", 32, 48, seed=0, d_max=3.0)
        assert d.values.min() >= 0.0
        assert d.values.max() <= 3.0 + 1e-12

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            hm.synth_depth("spiral", 8, 8, seed=0)

    def test_too_small(self):
        with pytest.raises(InputError):
            hm.synth_depth("radial", 4, 8, seed=0)


class TestMakeDataset:
    def test_reconstruction_invariant(self):
        for s in hm.make_dataset(4, seed=3, size=(16, 16)):
            recon = (s.clear * s.t + s.A * (1.0 - s.t)).astype(np.float32)
            assert np.array_equal(recon, s.hazy)
            assert np.all(s.t > 0) and np.all(s.t <= 1)

    def test_degenerate_beta_range(self):
        ds = hm.make_dataset(5, seed=0, size=(16, 16), beta_range=(0.9, 0.9))
        assert all(s.beta == 0.9 for s in ds)

    def test_bit_identical_across_calls(self, tmp_path):
        a = hm.make_dataset(4, seed=21, size=(16, 16))
        b = hm.make_dataset(4, seed=21, size=(16, 16))
        # serialization-compare: identical on-disk bytes
        da, db = tmp_path / "a", tmp_path / "b"
        hm.save_dataset(a, da)
        hm.save_dataset(b, db)
        for name in sorted(os.listdir(da / "hazy")):
            assert (da / "hazy" / name).read_bytes() == (db / "hazy" / name).read_bytes()
        assert (da / "manifest.jsonl").read_bytes() == (db / "manifest.jsonl").read_bytes()

    def test_workers_do_not_change_results(self):
        a = hm.make_dataset(4, seed=9, size=(16, 16), workers=1)
        b = hm.make_dataset(4, seed=9, size=(16, 16), workers=2)
        for x, y in zip(a, b):
            assert np.array_equal(x.hazy, y.hazy)
            assert np.array_equal(x.clear, y.clear)

    def test_translated_domain_tag(self):
        ds = hm.make_dataset(
            2, seed=0, size=(16, 16), domain_shift=hm.DomainShiftParams()
        )
        assert all(s.domain == "translated" for s in ds)

    def test_empty_image_dir_rejected(self, tmp_path):
        with pytest.raises(InputError):
            hm.make_dataset(1, seed=0, size=(16, 16), image_dir=str(tmp_path))

    def test_n_validated(self):
        with pytest.raises(ParameterError):
            hm.make_dataset(0, seed=0)


class TestTranslateDomain:
    def test_identity_params(self):
        rng = np.random.default_rng(4)
        img = rng.random((3, 16, 16)).astype(np.float32)
        out = hm.translate_domain(img, hm.DomainShiftParams.identity(), seed=99)
        assert np.array_equal(out, img)

    def test_zero_sigma_seed_independent(self):
        rng = np.random.default_rng(5)
        img = rng.random((3, 16, 16)).astype(np.float32)
        params = hm.DomainShiftParams(noise_sigma=0.0)
        a = hm.translate_domain(img, params, seed=1)
        b = hm.translate_domain(img, params, seed=2)
        assert np.array_equal(a, b)

    def test_histogram_shift_kl_positive(self):
        # histogram oracle: per-channel distributions must measurably move
        batch = np.stack([hm.procedural_clear_image(32, 32, seed=i) for i in range(16)])
        out = np.stack(
            [hm.translate_domain(img, hm.DomainShiftParams(), seed=i) for i, img in enumerate(batch)]
        )
        bins = np.linspace(0, 1, 33)
        for c in range(3):
            p, _ = np.histogram(batch[:, c], bins=bins)
            q, _ = np.histogram(out[:, c], bins=bins)
            p = (p + 1) / (p.sum() + len(p))
            q = (q + 1) / (q.sum() + len(q))
            kl = float(np.sum(p * np.log(p / q)))
            assert kl > 1e-4

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(6)
        img = rng.random((3, 16, 16))
        out = hm.translate_domain(img, hm.DomainShiftParams(), seed=0)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_params_validated(self):
        with pytest.raises(ParameterError):
            hm.DomainShiftParams(noise_sigma=0.1)
        with pytest.raises(ParameterError):
            hm.DomainShiftParams(color_cast=(0.5, 0.0, 0.0))
        with pytest.raises(ParameterError):
            hm.DomainShiftParams(beta_scale_per_channel=(0.0, 1.0, 1.0))


class TestDerivedInputs:
    def test_channel_count_and_range(self):
        rng = np.random.default_rng(7)
        img = rng.random((3, 16, 16))
        bank = hm.derive_inputs(img)
        assert bank.shape == (16, 16, 16)
        assert bank.min() >= 0.0 and bank.max() <= 1.0

    def test_batched(self):
        rng = np.random.default_rng(8)
        img = rng.random((2, 3, 8, 8))
        assert hm.derive_inputs(img).shape == (2, 16, 8, 8)

    def test_gray_world_fixed_point_on_gray(self):
        img = np.full((3, 16, 16), 0.5)
        bank = hm.derive_inputs(img)
        assert np.allclose(bank[3:6], img, rtol=0, atol=1e-12)

    def test_gamma_channels_scalar_oracle(self):
        img = np.full((3, 16, 16), 0.25)
        bank = hm.derive_inputs(img)
        assert np.allclose(bank[9:12], 0.25**1.5, rtol=0, atol=1e-12)
        # 0.25 ** 2.5 == 0.03125 exactly
        assert np.allclose(bank[12:15], 0.03125, rtol=0, atol=1e-15)

    def test_white_image_gray_channel(self):
        img = np.ones((3, 16, 16))
        bank = hm.derive_inputs(img)
        assert np.allclose(bank[15], 1.0, rtol=0, atol=1e-12)

    def test_layout_first_three_channels_are_input(self):
        rng = np.random.default_rng(9)
        img = rng.random((3, 8, 8))
        bank = hm.derive_inputs(img)
        assert np.array_equal(bank[:3], img)

    def test_non_rgb_rejected(self):
        with pytest.raises(InputError):
            hm.derive_inputs(np.zeros((4, 8, 8)))


class TestBankOperations:
    def test_gamma_identity_exponent(self):
        rng = np.random.default_rng(10)
        img = rng.random((3, 8, 8))
        assert np.array_equal(hm.gamma_correct(img, 1.0), img)

    def test_gamma_validated(self):
        with pytest.raises(ParameterError):
            hm.gamma_correct(np.zeros((3, 8, 8)), 0.0)

    def test_gray_scale_weights(self):
        img = np.zeros((3, 8, 8))
        img[0] = 1.0  # pure red
        assert np.allclose(hm.gray_scale(img), 0.299, rtol=0, atol=1e-12)

    def test_contrast_enhance_constant_fixed_point(self):
        img = np.full((3, 8, 8), 0.42)
        assert np.allclose(hm.contrast_enhance(img), 0.42, rtol=0, atol=1e-12)

    def test_contrast_enhance_stretches(self):
        img = np.full((3, 8, 8), 0.5)
        img[:, :4] = 0.4
        img[:, 4:] = 0.6
        out = hm.contrast_enhance(img)
        assert np.allclose(out[:, :4], 0.3, atol=1e-12)
        assert np.allclose(out[:, 4:], 0.7, atol=1e-12)

    def test_white_balance_equalizes_channel_means(self):
        rng = np.random.default_rng(11)
        img = np.clip(rng.random((3, 32, 32)) * np.array([0.9, 0.5, 0.7])[:, None, None] + 0.05, 0, 1)
        out = hm.white_balance(img)
        means = out.mean(axis=(1, 2))
        assert np.max(means) - np.min(means) < np.max(img.mean(axis=(1, 2))) - np.min(img.mean(axis=(1, 2)))


class TestDiskFormat:
    def test_png_round_trip_8bit(self, tmp_path):
        rng = np.random.default_rng(12)
        img = rng.random((3, 16, 16)).astype(np.float32)
        p = tmp_path / "x.png"
        hm.save_image_png(img, p)
        back = hm.load_image_png(p)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6

    def test_tmap_round_trip_16bit(self, tmp_path):
        rng = np.random.default_rng(13)
        t = rng.uniform(0.01, 1.0, (16, 16)).astype(np.float32)
        p = tmp_path / "t.png"
        hm.save_tmap_png(t, p)
        back = hm.load_tmap_png(p)
        assert np.abs(back - t).max() <= 0.5 / 65535 + 1e-7

    def test_dataset_round_trip(self, tmp_path):
        ds = hm.make_dataset(3, seed=1, size=(16, 16))
        hm.save_dataset(ds, tmp_path / "d")
        back = hm.load_dataset(tmp_path / "d")
        assert len(back) == 3
        for a, b in zip(ds, back):
            assert a.sample_id == b.sample_id
            assert a.beta == b.beta and a.A == b.A and a.domain == b.domain
            assert np.abs(a.hazy - b.hazy).max() <= 0.5 / 255 + 1e-6

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(InputError):
            hm.load_dataset(tmp_path)


class TestSplit:
    def test_deterministic_split(self):
        ds = hm.make_dataset(20, seed=2, size=(16, 16))
        train, val = hm.split_dataset(ds, 0.1)
        assert len(val) == 2
        assert [s.sample_id for s in val] == ["00009", "00019"]

    def test_zero_fraction(self):
        ds = hm.make_dataset(3, seed=2, size=(16, 16))
        train, val = hm.split_dataset(ds, 0)
        assert len(train) == 3 and val == []
