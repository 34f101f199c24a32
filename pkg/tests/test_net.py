import math

import numpy as np
import pytest
import torch

from trajlab.errors import ConfigurationError, NumericalError
from trajlab.loss import batch_loss
from trajlab.net import (
    HypothesisSet,
    NetConfig,
    backbone_forward,
    build_model,
    fuse_hypotheses,
    gradient_check,
    head_forward,
    model_forward,
)
from trajlab.raster import RasterConfig, build_stack, specs_for_subset
from trajlab.scenegen import generate_scene

SMALL = dict(size_px=16, conv_channels=(4, 8), feature_dim=16, head_hidden=16, d_model=16, num_heads=2)


def small(**kw):
    return build_model(NetConfig(**{**SMALL, **kw}))


def random_sets(rng, n, k, t=12):
    out = []
    for _ in range(n):
        logits = rng.normal(size=k)
        conf = np.exp(logits) / np.exp(logits).sum()
        out.append(HypothesisSet(rng.normal(0, 10, size=(k, t, 2)), logits, conf))
    return out


class TestBackbone:
    def test_zero_params_zero_output(self):
        model = small()
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        grid = np.random.default_rng(0).random((16, 16, 3))
        assert np.all(backbone_forward(grid, model) == 0.0)

    def test_deterministic(self):
        grid = np.random.default_rng(1).random((16, 16, 3))
        a = backbone_forward(grid, small(seed=3))
        b = backbone_forward(grid, small(seed=3))
        assert a.tobytes() == b.tobytes()

    def test_homogeneous_in_linear_mode(self):
        model = small(activation="identity")
        grid = np.random.default_rng(2).random((16, 16, 3))
        np.testing.assert_allclose(backbone_forward(2 * grid, model), 2 * backbone_forward(grid, model),
                                   rtol=1e-5, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            backbone_forward(np.zeros((8, 8, 3)), small())


class TestHead:
    def test_equal_logits_uniform(self):
        model = small(modes_per_head=5)
        with torch.no_grad():
            model.heads[0].fc2.weight.zero_()
        out = head_forward(np.ones(16), np.zeros(3), model)
        np.testing.assert_allclose(out.confidences, np.full(5, 0.2), atol=1e-7)

    def test_log_logits(self):
        model = build_model(NetConfig(**{**SMALL, "modes_per_head": 3}), dtype=torch.float64)
        stride = 2 * 12 + 1
        with torch.no_grad():
            model.heads[0].fc2.weight.zero_()
            for k in range(3):
                model.heads[0].fc2.bias[k * stride + 2 * 12] = math.log(k + 1)
        out = head_forward(np.ones(16), np.zeros(3), model)
        np.testing.assert_allclose(out.confidences, [1 / 6, 1 / 3, 1 / 2], atol=1e-12)

    def test_shape_k12_t12(self):
        out = head_forward(np.ones(16), [5.0, 0.0, 0.0], small(modes_per_head=12, horizon=12))
        assert out.trajectories.shape == (12, 12, 2)
        assert out.k == 12 and len(out.hypotheses) == 12
        assert out.confidences.sum() == pytest.approx(1.0, abs=1e-6)


class TestFusion:
    def test_permutation_of_pooled_tokens(self):
        torch.manual_seed(0)
        model = build_model(NetConfig(**SMALL, num_backbones=4, modes_per_head=4, modes=3), torch.float64)
        trajs = torch.randn(1, 16, 12, 2, dtype=torch.float64) * 10
        conf = torch.softmax(torch.randn(1, 16, dtype=torch.float64), -1)
        ids = torch.arange(4).repeat_interleave(4)
        base = model.fusion(trajs, conf, ids)
        gen = torch.Generator().manual_seed(1)
        for _ in range(20):
            perm = torch.randperm(16, generator=gen)
            out = model.fusion(trajs[:, perm], conf[:, perm], ids[perm])
            assert (out[0] - base[0]).abs().max() < 1e-5
            assert (out[1] - base[1]).abs().max() < 1e-5

    def test_permutation_without_backbone_ids(self):
        rng = np.random.default_rng(2)
        model = small(num_backbones=3, modes_per_head=4, backbone_id=False)
        sets = random_sets(rng, 3, 4)
        base = fuse_hypotheses(sets, model)
        pooled_t = np.concatenate([s.trajectories for s in sets])
        pooled_c = np.concatenate([s.confidences for s in sets])
        perm = rng.permutation(12)
        shuffled = [HypothesisSet(pooled_t[perm][i * 4:(i + 1) * 4], np.zeros(4), pooled_c[perm][i * 4:(i + 1) * 4])
                    for i in range(3)]
        out = fuse_hypotheses(shuffled, model)
        np.testing.assert_allclose(out.trajectories, base.trajectories, atol=1e-5)
        np.testing.assert_allclose(out.confidences, base.confidences, atol=1e-5)

    def test_duplicated_hypotheses(self):
        model = build_model(NetConfig(**SMALL, num_backbones=2, modes_per_head=4, modes=3), torch.float64)
        trajs = torch.randn(1, 8, 12, 2, dtype=torch.float64) * 10
        conf = torch.softmax(torch.randn(1, 8, dtype=torch.float64), -1)
        ids = torch.arange(2).repeat_interleave(4)
        f1, c1 = model.fusion(trajs, conf, ids)
        f2, c2 = model.fusion(trajs.repeat(1, 2, 1, 1), conf.repeat(1, 2), ids.repeat(2))
        assert c2.sum().item() == pytest.approx(1.0, abs=1e-12)
        torch.testing.assert_close(f2, f1, rtol=0, atol=1e-9)
        torch.testing.assert_close(c2, c1, rtol=0, atol=1e-12)

    def test_single_set_k_equals_m(self):
        model = small(num_backbones=1, modes_per_head=3, modes=3)
        out = fuse_hypotheses(random_sets(np.random.default_rng(0), 1, 3), model)
        assert out.trajectories.shape == (3, 12, 2)
        assert out.confidences.sum() == pytest.approx(1.0, abs=1e-6)

    def test_mismatched_horizon(self):
        model = small(num_backbones=2, modes_per_head=2)
        rng = np.random.default_rng(0)
        sets = random_sets(rng, 1, 2, t=12) + random_sets(rng, 1, 2, t=8)
        with pytest.raises(ConfigurationError):
            fuse_hypotheses(sets, model)

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            fuse_hypotheses([], small())


class TestModelForward:
    scene = generate_scene(5)

    @pytest.mark.parametrize("modes", [3, 12])
    def test_default_stack(self, modes):
        raster = RasterConfig(size_px=16)
        stack = build_stack(self.scene.scene, specs_for_subset((1, 2, 3, 4)), raster)
        model = small(modes=modes, modes_per_head=12)
        pred, sets = model_forward(stack, self.scene.kinematics, model)
        assert pred.trajectories.shape == (modes, 12, 2)
        assert len(sets) == 4 and all(s.trajectories.shape == (12, 12, 2) for s in sets)

    def test_three_layer_subset(self):
        stack = build_stack(self.scene.scene, specs_for_subset((2, 3, 4)), RasterConfig(size_px=16))
        pred, sets = model_forward(stack, self.scene.kinematics, small(num_backbones=3))
        assert len(sets) == 3 and pred.trajectories.shape == (3, 12, 2)

    def test_layer_count_mismatch(self):
        stack = build_stack(self.scene.scene, specs_for_subset((2, 3, 4)), RasterConfig(size_px=16))
        with pytest.raises(ConfigurationError):
            model_forward(stack, self.scene.kinematics, small(num_backbones=4))

    def test_deterministic(self):
        stack = build_stack(self.scene.scene, specs_for_subset((1, 2, 3, 4)), RasterConfig(size_px=16))
        a, _ = model_forward(stack, self.scene.kinematics, small(seed=9))
        b, _ = model_forward(stack, self.scene.kinematics, small(seed=9))
        assert a.trajectories.tobytes() == b.trajectories.tobytes()

    def test_confidences_normalized(self):
        model = small(modes=12)
        gen = torch.Generator().manual_seed(0)
        with torch.no_grad():
            fused, conf, hyps = model(torch.rand(200, 4, 3, 16, 16, generator=gen),
                                      torch.randn(200, 3, generator=gen))
        assert (conf.sum(-1) - 1).abs().max() < 1e-6
        assert ((conf > 0) & (conf < 1)).all()
        for _, _, c in hyps:
            assert (c.sum(-1) - 1).abs().max() < 1e-6


class TestGradientCheck:
    def test_quadratic(self):
        p = torch.randn(30, dtype=torch.float64, requires_grad=True)
        assert gradient_check(lambda: (p**2).sum(), [p]) < 1e-8

    def test_non_finite(self):
        p = torch.ones(3, dtype=torch.float64, requires_grad=True)
        with pytest.raises(NumericalError):
            gradient_check(lambda: (p / 0.0).sum(), [p])

    def _pipeline(self, variant):
        model = build_model(NetConfig(**{**SMALL, "modes_per_head": 4, "modes": 3}), torch.float64)
        gen = torch.Generator().manual_seed(0)
        x = torch.rand(2, 4, 3, 16, 16, generator=gen, dtype=torch.float64)
        kin = torch.tensor([[5.0, 0.2, 0.0], [8.0, -0.1, 0.05]], dtype=torch.float64)
        s = torch.linspace(1 / 12, 1, 12, dtype=torch.float64)[:, None]
        gt = torch.stack([s * torch.tensor([30.0, 0.0]), s * torch.tensor([20.0, 15.0])]).to(torch.float64)

        def fn():
            fused, conf, _ = model(x, kin)
            return batch_loss(fused, conf, gt, variant).mean

        return model, fn

    @pytest.mark.parametrize("variant", ["mtp", "angle_scaled"])
    def test_pipeline(self, variant):
        model, fn = self._pipeline(variant)
        assert gradient_check(fn, list(model.parameters()), num_coords=50) < 1e-4
