import numpy as np
import pytest
import torch

from gridhaze.errors import ConfigError, InputError
from gridhaze.losses import (
    LossWeights,
    PerceptualExtractor,
    distill_loss,
    fidelity_loss,
    perceptual_loss,
    total_loss,
)
from gridhaze.network import FeatureTap


def central_diff_grad(fn, x, eps=1e-6):
    flat = x.detach().flatten()
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        xp, xm = flat.clone(), flat.clone()
        xp[i] += eps
        xm[i] -= eps
        grad[i] = (fn(xp.view_as(x)) - fn(xm.view_as(x))) / (2 * eps)
    return grad.view_as(x)


def assert_grad_matches(fn, x, rtol=1e-6):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    fd = central_diff_grad(fn, x)
    denom = torch.clamp(fd.abs(), min=1.0)
    assert ((x.grad - fd).abs() / denom).max().item() < rtol


class TestFidelity:
    def test_zero_on_identical(self):
        x = torch.rand(2, 3, 8, 8)
        assert fidelity_loss(x, x).item() == 0.0

    def test_uniform_half_error(self):
        p = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
        t = torch.zeros_like(p)
        assert abs(fidelity_loss(p, t).item() - 0.125) < 1e-12

    def test_uniform_error_two(self):
        p = torch.full((1, 3, 4, 4), 2.0, dtype=torch.float64)
        t = torch.zeros_like(p)
        assert abs(fidelity_loss(p, t).item() - 1.5) < 1e-12

    def test_once_differentiable_at_kink(self):
        # both branches meet at 0.5 with slope 1 around |e| = 1
        def h(e):
            e = torch.as_tensor(e, dtype=torch.float64)
            return fidelity_loss(e.view(1, 1, 1, 1), torch.zeros(1, 1, 1, 1, dtype=torch.float64)).item()

        for sign in (1.0, -1.0):
            for delta in (1e-4, 1e-6, 1e-8):
                lo, hi = h(sign * (1 - delta)), h(sign * (1 + delta))
                assert abs(hi - lo) < 3 * delta  # continuity
                slope = (hi - lo) / (2 * delta)
                assert abs(slope - 1.0) < 1e-3  # matched one-sided slopes
        assert abs(h(1.0) - 0.5) < 1e-15
        assert abs(h(-1.0) - 0.5) < 1e-15

    def test_gradient_straddling_kink(self):
        rng = np.random.default_rng(0)
        target = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
        # errors on both sides of |e| = 1
        pred = torch.from_numpy(rng.uniform(-2.0, 2.0, (1, 3, 4, 4)))
        assert_grad_matches(lambda x: fidelity_loss(x, target), pred)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            fidelity_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 8, 8))


class TestPerceptual:
    @pytest.fixture(scope="class")
    def extractor(self):
        return PerceptualExtractor(seed=7).double()

    def test_zero_on_identical(self, extractor):
        x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        assert perceptual_loss(x, x, extractor).item() == 0.0

    def test_symmetric(self, extractor):
        a = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        b = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        assert perceptual_loss(a, b, extractor).item() == perceptual_loss(b, a, extractor).item()

    def test_quadratic_scaling_small_perturbation(self, extractor):
        base = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 0.8 + 0.1
        direction = torch.randn(1, 3, 16, 16, dtype=torch.float64)
        eps = 1e-3
        l1 = perceptual_loss(base + eps * direction, base, extractor).item()
        l2 = perceptual_loss(base + 2 * eps * direction, base, extractor).item()
        assert abs(l2 / l1 - 4.0) < 0.2

    def test_stage_geometry(self, extractor):
        feats = extractor(torch.rand(1, 3, 32, 32, dtype=torch.float64))
        assert [tuple(f.shape[1:]) for f in feats] == [
            (64, 32, 32),
            (128, 16, 16),
            (256, 8, 8),
        ]

    def test_gradient_matches_finite_differences(self, extractor):
        target = torch.rand(1, 3, 4, 4, dtype=torch.float64)
        pred = torch.rand(1, 3, 4, 4, dtype=torch.float64)
        assert_grad_matches(lambda x: perceptual_loss(x, target, extractor), pred)

    def test_weights_frozen(self, extractor):
        assert all(not p.requires_grad for p in extractor.parameters())

    def test_seed_determinism(self):
        a = PerceptualExtractor(seed=3)
        b = PerceptualExtractor(seed=3)
        c = PerceptualExtractor(seed=4)
        x = torch.rand(1, 3, 8, 8)
        assert torch.equal(a(x)[2], b(x)[2])
        assert not torch.equal(a(x)[2], c(x)[2])

    def test_save_load_round_trip(self, tmp_path):
        ext = PerceptualExtractor(seed=5)
        path = tmp_path / "extractor.ckpt"
        ext.save(path)
        back = PerceptualExtractor.load(path)
        for p, q in zip(ext.parameters(), back.parameters()):
            assert torch.equal(p, q)


def _taps(values, positions=((0, 3), (0, 4), (0, 5))):
    return [FeatureTap(pos, v) for pos, v in zip(positions, values)]


class TestDistill:
    def test_zero_on_identical(self):
        x = torch.rand(2, 4, 8, 8)
        assert distill_loss(_taps([x, x, x]), _taps([x, x, x])).item() == 0.0

    def test_constant_offset_counts_elements(self):
        # taps differing by 1 everywhere sum to the per-tap element count
        s = [torch.zeros(2, 4, 8, 8) for _ in range(3)]
        t = [torch.ones(2, 4, 8, 8) for _ in range(3)]
        expected = 4 * 8 * 8  # per image, averaged over batch and taps
        assert distill_loss(_taps(s), _taps(t)).item() == expected

    def test_swap_symmetric(self):
        rng = torch.Generator().manual_seed(0)
        s = [torch.rand(1, 4, 8, 8, generator=rng) for _ in range(3)]
        t = [torch.rand(1, 4, 8, 8, generator=rng) for _ in range(3)]
        assert distill_loss(_taps(s), _taps(t)).item() == distill_loss(_taps(t), _taps(s)).item()

    def test_position_mismatch(self):
        x = torch.zeros(1, 4, 8, 8)
        with pytest.raises(InputError):
            distill_loss(_taps([x], [(0, 3)]), _taps([x], [(0, 4)]))

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            distill_loss(
                _taps([torch.zeros(1, 4, 8, 8)], [(0, 3)]),
                _taps([torch.zeros(1, 8, 8, 8)], [(0, 3)]),
            )

    def test_gradient_matches_finite_differences(self):
        teacher = [torch.rand(1, 2, 4, 4, dtype=torch.float64) for _ in range(3)]

        def fn(x):
            return distill_loss(_taps([x, x * 0.5, x - 1.0]), _taps(teacher))

        assert_grad_matches(fn, torch.rand(1, 2, 4, 4, dtype=torch.float64) + 0.25)


class TestTotal:
    def test_default_weights_unit_components(self):
        w = LossWeights()
        assert abs(total_loss(1.0, 1.0, 1.0, w) - 1.05) < 1e-12

    def test_fidelity_only(self):
        w = LossWeights()
        assert total_loss(0.37, 0.0, 0.0, w) == 0.37

    def test_zero_weights_ignore_other_terms(self):
        w = LossWeights(0.0, 0.0)
        assert total_loss(0.9, 123.0, 456.0, w) == 0.9

    def test_linear_in_each_component(self):
        w = LossWeights(0.04, 0.01)
        base = total_loss(1.0, 2.0, 3.0, w)
        assert abs(total_loss(2.0, 2.0, 3.0, w) - base - 1.0) < 1e-12
        assert abs(total_loss(1.0, 4.0, 3.0, w) - base - 0.04 * 2.0) < 1e-12
        assert abs(total_loss(1.0, 2.0, 5.0, w) - base - 0.01 * 2.0) < 1e-12

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(-0.1, 0.0)
