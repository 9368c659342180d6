import numpy as np
import pytest

from glsim.dp import DPConfig, apply_dp, clip_update, noise_std
from glsim.errors import ConfigurationError
from glsim.nn import GradientUpdate, LayerGrad, flatten_update, per_layer_l2_norm
from glsim.rng import RngStream


def make_update(gen, shapes=((3, 4), (2, 3))):
    return GradientUpdate(
        [LayerGrad(gen.standard_normal(s) * 2, gen.standard_normal(s[0]) * 2) for s in shapes]
    )


class TestClip:
    def test_small_norm_unchanged(self):
        upd = GradientUpdate([LayerGrad(np.array([[0.3, 0.4]]), np.zeros(1))])
        out = clip_update(upd, 1.0)
        assert np.array_equal(out.layers[0].weights, upd.layers[0].weights)

    def test_three_four_scales_to_unit_norm(self):
        upd = GradientUpdate([LayerGrad(np.array([[3.0, 4.0]]), np.zeros(1))])
        out = clip_update(upd, 1.0)
        assert np.allclose(out.layers[0].weights, [[0.6, 0.8]])
        assert per_layer_l2_norm(out)[0] == pytest.approx(1.0)

    def test_random_updates_respect_bound(self):
        gen = np.random.default_rng(0)
        for _ in range(50):
            out = clip_update(make_update(gen), 1.0)
            assert all(n <= 1.0 + 1e-12 for n in per_layer_l2_norm(out))

    def test_clipping_is_idempotent(self):
        gen = np.random.default_rng(1)
        upd = make_update(gen)
        once = clip_update(upd, 0.7)
        twice = clip_update(once, 0.7)
        assert np.array_equal(flatten_update(once), flatten_update(twice))

    def test_global_granularity_bounds_total_norm(self):
        gen = np.random.default_rng(2)
        out = clip_update(make_update(gen), 1.0, granularity="global")
        total = np.sqrt(sum(n**2 for n in per_layer_l2_norm(out)))
        assert total <= 1.0 + 1e-12

    def test_invalid_clip_rejected(self):
        with pytest.raises(ConfigurationError):
            clip_update(make_update(np.random.default_rng(3)), 0.0)


class TestNoiseStd:
    def test_ldp(self):
        assert noise_std(DPConfig("ldp", clip=1.0, sigma=0.1)) == pytest.approx(0.1)

    def test_ddp_divides_by_sqrt_m_minus_one(self):
        cfg = DPConfig("ddp", clip=1.0, sigma=0.1, participants=100)
        assert noise_std(cfg) == pytest.approx(0.1 / np.sqrt(99))
        assert noise_std(cfg) == pytest.approx(0.0100504, abs=5e-8)

    def test_zero_sigma_means_zero_noise(self):
        for mode in ("none", "ldp", "ddp"):
            assert noise_std(DPConfig(mode, clip=2.0, sigma=0.0, participants=5)) == 0.0

    def test_ddp_needs_two_participants(self):
        with pytest.raises(ConfigurationError):
            DPConfig("ddp", clip=1.0, sigma=0.1, participants=1)

    def test_ddp_std_decreases_with_participants(self):
        stds = [
            noise_std(DPConfig("ddp", clip=1.0, sigma=0.1, participants=m))
            for m in (2, 5, 10, 100, 1000)
        ]
        assert all(a > b for a, b in zip(stds, stds[1:]))

    def test_negative_sigma_rejected(self):
        with pytest.raises(ConfigurationError):
            DPConfig("ldp", clip=1.0, sigma=-1.0)


class TestApplyDP:
    def test_mode_none_returns_clipped_input_exactly(self):
        gen = np.random.default_rng(4)
        upd = make_update(gen)
        out = apply_dp(upd, DPConfig("none", clip=1.0), RngStream(0))
        ref = clip_update(upd, 1.0)
        assert np.array_equal(flatten_update(out), flatten_update(ref))

    def test_empirical_noise_variance(self):
        # ddp sigma=0.1 c=1 M=2 -> std 0.1; variance of 1e6 entries within 1%
        shape = (1000, 1000)
        upd = GradientUpdate([LayerGrad(np.zeros(shape), np.zeros(1000))])
        cfg = DPConfig("ddp", clip=1.0, sigma=0.1, participants=2)
        out = apply_dp(upd, cfg, RngStream(123).child("noise"))
        var = out.layers[0].weights.var()
        assert var == pytest.approx(0.01, rel=0.01)

    def test_fixed_seed_is_bitwise_reproducible(self):
        gen = np.random.default_rng(5)
        upd = make_update(gen)
        cfg = DPConfig("ddp", clip=1.0, sigma=0.1, participants=10)
        a = apply_dp(upd, cfg, RngStream(9).child("dp", 3))
        b = apply_dp(upd, cfg, RngStream(9).child("dp", 3))
        assert np.array_equal(flatten_update(a), flatten_update(b))

    def test_noise_lands_on_bias_too(self):
        upd = GradientUpdate([LayerGrad(np.zeros((2, 2)), np.zeros(2))])
        out = apply_dp(upd, DPConfig("ldp", clip=1.0, sigma=0.5), RngStream(1))
        assert np.abs(out.layers[0].bias).max() > 0

    def test_empirical_std_within_three_standard_errors(self):
        cfg = DPConfig("ddp", clip=1.0, sigma=0.1, participants=100)
        n = 200_000
        upd = GradientUpdate([LayerGrad(np.zeros((n // 100, 100)), np.zeros(1))])
        out = apply_dp(upd, cfg, RngStream(77))
        sample_std = out.layers[0].weights.std()
        true = noise_std(cfg)
        se = true / np.sqrt(2 * (n - 1))
        assert abs(sample_std - true) < 3 * se
