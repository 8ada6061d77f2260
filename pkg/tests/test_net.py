import math

import numpy as np
import pytest
import torch

from denseood.datamodel import NormStats
from denseood.net import (
    FcnConfig,
    FreezePolicy,
    ModelCheckpoint,
    backbone_activations,
    build_model,
    flatten_params,
    forward_confidence,
    forward_heads,
    forward_ood,
    forward_segmentation,
    init_checkpoint,
    init_model,
    input_gradient,
)

STATS = NormStats(mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
SMALL = FcnConfig(stages=3, widths=(8, 12, 16), skip_stage=2, class_count=5)


@pytest.fixture(scope="module")
def ckpt():
    return init_checkpoint(SMALL, seed=42, norm_stats=STATS)


def image(h=32, w=40, seed=0):
    return np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            FcnConfig(stages=3, widths=(8, 12))
        with pytest.raises(ValueError):
            FcnConfig(skip_stage=4)
        with pytest.raises(ValueError):
            FcnConfig(dropout=1.0)
        with pytest.raises(ValueError):
            FcnConfig(heads=("confidence",))
        with pytest.raises(ValueError):
            FcnConfig(heads=("bogus",))

    def test_param_count_matches_model(self):
        for cfg in (SMALL, FcnConfig(), FcnConfig(heads=("ood",))):
            model = init_model(cfg, 0)
            assert cfg.param_count() == sum(p.numel() for p in model.parameters())

    def test_dict_roundtrip(self):
        assert FcnConfig.from_dict(SMALL.to_dict()) == SMALL


class TestForward:
    def test_shapes_full_resolution(self, ckpt):
        img = image(32, 40)
        assert forward_segmentation(ckpt, img).shape == (32, 40, 5)
        assert forward_ood(ckpt, img).shape == (32, 40, 2)
        logits, conf = forward_confidence(ckpt, img)
        assert logits.shape == (32, 40, 5)
        assert conf.shape == (32, 40)

    def test_non_multiple_dims_padded_and_cropped(self, ckpt):
        img = image(37, 45)
        assert forward_segmentation(ckpt, img).shape == (37, 45, 5)
        assert forward_ood(ckpt, img).shape == (37, 45, 2)

    def test_deterministic_without_dropout(self, ckpt):
        img = image()
        a = forward_segmentation(ckpt, img)
        b = forward_segmentation(ckpt, img)
        np.testing.assert_array_equal(a, b)

    def test_zero_params_constant_logits(self):
        zero = ModelCheckpoint(
            config=SMALL,
            params=np.zeros(SMALL.param_count(), np.float32),
            norm_stats=STATS,
        )
        logits = forward_segmentation(zero, image())
        assert np.allclose(logits, logits[0, 0])

    def test_ood_softmax_sums_to_one(self, ckpt):
        from denseood.scoring import softmax

        p = softmax(forward_ood(ckpt, image()))
        np.testing.assert_allclose(p.sum(axis=2), 1.0, atol=1e-6)

    def test_shared_backbone_activations(self, ckpt):
        img = image()
        a = backbone_activations(ckpt, img)
        b = backbone_activations(ckpt, img)
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa, fb)

    def test_confidence_range(self, ckpt):
        _, conf = forward_confidence(ckpt, image())
        assert conf.min() > 0.0 and conf.max() < 1.0

    def test_confidence_head_required(self):
        cfg = FcnConfig(stages=3, widths=(8, 12, 16), heads=("segmentation",), class_count=5)
        ck = init_checkpoint(cfg, 0, STATS)
        with pytest.raises(ValueError):
            forward_confidence(ck, image())


class TestGradientBlock:
    def test_confidence_grad_wrt_seg_head_is_zero(self, ckpt):
        model = build_model(ckpt, torch.float64)
        x = torch.from_numpy(image(16, 16).astype(np.float64)).permute(2, 0, 1).unsqueeze(0)
        out = model(x, heads=("segmentation", "confidence"))
        conf_sum = out["confidence"].sum()
        seg_params = list(model.seg_head.parameters())
        grads = torch.autograd.grad(conf_sum, seg_params, allow_unused=True)
        assert all(g is None or torch.all(g == 0) for g in grads)

    def test_confidence_grad_reaches_backbone(self, ckpt):
        model = build_model(ckpt, torch.float64)
        x = torch.from_numpy(image(16, 16).astype(np.float64)).permute(2, 0, 1).unsqueeze(0)
        out = model(x, heads=("segmentation", "confidence"))
        (grad,) = torch.autograd.grad(out["confidence"].sum(), model.stage1.down.weight)
        assert torch.any(grad != 0)


class TestInputGradient:
    def test_matches_central_differences(self, ckpt):
        rng = np.random.default_rng(3)
        for trial in range(5):
            img = rng.random((8, 8, 3)).astype(np.float64)
            T = [1.0, 2.0, 10.0, 0.5, 5.0][trial]
            grad = input_gradient(ckpt, img, T, dtype=torch.float64)
            model = build_model(ckpt, torch.float64)

            def obj(x):
                xt = torch.from_numpy(x)
                mean = torch.tensor(STATS.mean, dtype=torch.float64)
                std = torch.tensor(STATS.std, dtype=torch.float64)
                inp = ((xt - mean) / std).permute(2, 0, 1).unsqueeze(0)
                with torch.no_grad():
                    logits = model(inp, heads=("segmentation",))["segmentation"]
                w = logits.argmax(dim=1, keepdim=True)
                return float(torch.log_softmax(logits / T, dim=1).gather(1, w).sum())

            h = 1e-5
            checks = [(0, 0, 0), (3, 5, 1), (7, 7, 2), (2, 6, 0)]
            for (i, j, c) in checks:
                xp = img.copy(); xp[i, j, c] += h
                xm = img.copy(); xm[i, j, c] -= h
                fd = (obj(xp) - obj(xm)) / (2 * h)
                denom = max(abs(fd), abs(grad[i, j, c]), 1e-8)
                assert abs(fd - grad[i, j, c]) / denom < 1e-4

    def test_zero_model_zero_gradient(self):
        zero = ModelCheckpoint(
            config=SMALL, params=np.zeros(SMALL.param_count(), np.float32), norm_stats=STATS
        )
        g = input_gradient(zero, image(16, 16).astype(np.float64), 1.0, dtype=torch.float64)
        assert np.all(g == 0.0)

    def test_linearity_in_objective_scale(self, ckpt):
        # doubling the objective doubles the gradient: compare against a
        # manual autograd pass with the objective multiplied by two
        img = image(8, 8).astype(np.float64)
        g1 = input_gradient(ckpt, img, 1.0, dtype=torch.float64)
        model = build_model(ckpt, torch.float64)
        x = torch.from_numpy(img).requires_grad_(True)
        mean = torch.tensor(STATS.mean, dtype=torch.float64)
        std = torch.tensor(STATS.std, dtype=torch.float64)
        logits = model(((x - mean) / std).permute(2, 0, 1).unsqueeze(0), heads=("segmentation",))["segmentation"]
        w = logits.argmax(dim=1, keepdim=True).detach()
        obj = 2.0 * torch.log_softmax(logits, dim=1).gather(1, w).sum()
        (g2,) = torch.autograd.grad(obj, x)
        np.testing.assert_allclose(g2.numpy(), 2.0 * g1, rtol=1e-10, atol=1e-12)

    def test_nonpositive_temperature_rejected(self, ckpt):
        with pytest.raises(ValueError):
            input_gradient(ckpt, image(), 0.0)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, ckpt, tmp_path):
        ckpt.save(tmp_path / "m.ckpt")
        back = ModelCheckpoint.load(tmp_path / "m.ckpt")
        np.testing.assert_array_equal(back.params, ckpt.params)
        assert back.config == ckpt.config
        assert back.norm_stats == ckpt.norm_stats
        (tmp_path / "m2.ckpt").write_bytes((tmp_path / "m.ckpt").read_bytes())
        back.save(tmp_path / "m3.ckpt")
        assert (tmp_path / "m3.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()

    def test_param_count_enforced(self):
        with pytest.raises(ValueError):
            ModelCheckpoint(config=SMALL, params=np.zeros(10, np.float32), norm_stats=STATS)

    def test_corrupt_payload_rejected(self, ckpt, tmp_path):
        ckpt.save(tmp_path / "m.ckpt")
        blob = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(blob[:-4])
        from denseood.datamodel import FormatError

        with pytest.raises(FormatError):
            ModelCheckpoint.load(tmp_path / "bad.ckpt")

    def test_flatten_order_stable(self, ckpt):
        model = build_model(ckpt)
        np.testing.assert_array_equal(flatten_params(model), ckpt.params)


class TestDropoutSampling:
    def test_mc_passes_differ_only_when_sampling(self):
        cfg = FcnConfig(stages=3, widths=(8, 12, 16), class_count=5, dropout=0.3)
        ck = init_checkpoint(cfg, 7, STATS)
        img = image()
        torch.manual_seed(0)
        a = forward_heads(ck, img, ("segmentation",), sample_dropout=True)["segmentation"]
        b = forward_heads(ck, img, ("segmentation",), sample_dropout=True)["segmentation"]
        assert not np.array_equal(a, b)
        c = forward_heads(ck, img, ("segmentation",))["segmentation"]
        d = forward_heads(ck, img, ("segmentation",))["segmentation"]
        np.testing.assert_array_equal(c, d)


class TestFreezePolicy:
    def test_groups(self):
        names = FreezePolicy.group_names(FcnConfig())
        assert names == ("stage1", "stage2", "stage3", "stage4", "seg_head", "conf_head", "ood_head")
        pol = FreezePolicy.ood_finetune(FcnConfig())
        assert pol.trainable == {"stage4", "ood_head"}
        with pytest.raises(ValueError):
            FreezePolicy(frozenset())
