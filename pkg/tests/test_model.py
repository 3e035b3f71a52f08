import math

import numpy as np
import pytest

from lesioncascade.autodiff import ConfigurationError, Parameter, Tensor, backward, cross_entropy, no_grad
from lesioncascade.dgff import DgffParams, identity_kernel
from lesioncascade.gradcheck import check_gradients, directional_check
from lesioncascade.model import (
    CascadeNet,
    ModelConfig,
    StageOutputs,
    StageParams,
    seg_head,
    stage_forward,
    total_loss,
)

SMALL = (4, 4, 6, 6, 6)


def small_model(stages=1, precision="float64", seed=0, **kw):
    return CascadeNet(ModelConfig(block_channels=SMALL, num_stages=stages, precision=precision, **kw), seed=seed)


def images(n=2, size=64, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size))


def test_backbone_shapes():
    model = CascadeNet(ModelConfig())
    blocks = model.backbone_forward(images(1))
    sizes = [b.shape[2:] for b in blocks]
    assert sizes == [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]
    assert [b.shape[1] for b in blocks] == [16, 32, 64, 128, 256]
    with pytest.raises(ConfigurationError):
        model.backbone_forward(np.zeros((1, 3, 48, 64)))


def test_zero_image_gives_zero_features():
    model = small_model()
    for b in model.backbone_forward(np.zeros((1, 3, 32, 32))):
        assert np.all(b.data == 0)
    assert np.all(model.features(np.zeros((1, 3, 32, 32))).data == 0)


def test_fusion_shape_and_zero_blocks():
    model = small_model()
    for size in (32, 64, 96):
        blocks = model.backbone_forward(images(1, size))
        assert model.fuse_fcn8s(*blocks[2:]).shape == (1, 6, size // 8, size // 8)
    zeros = [Tensor(np.zeros((1, 6, s, s))) for s in (8, 4, 2)]
    assert np.all(model.fuse_fcn8s(*zeros).data == 0)


def test_fusion_footprint_of_one_block5_pixel():
    model = small_model()
    for (w, b), on in zip(model.projections, (False, False, True)):
        w.data = np.eye(6).reshape(6, 6, 1, 1) if on else np.zeros_like(w.data)
        b.data = np.zeros_like(b.data)
    b5 = np.zeros((1, 6, 2, 2))
    b5[0, 0, 0, 0] = 1.0
    fused = model.fuse_fcn8s(Tensor(np.zeros((1, 6, 8, 8))), Tensor(np.zeros((1, 6, 4, 4))), Tensor(b5)).data
    # half-pixel sampling 2 -> 8: pixel 0 has weight 1 up to its center, then falls off linearly
    v = np.array([1, 1, 0.875, 0.625, 0.375, 0.125, 0, 0])
    np.testing.assert_allclose(fused[0, 0], np.outer(v, v), atol=1e-12)
    assert np.all(fused[0, 1:] == 0)


def test_seg_head_examples():
    feats = Tensor(np.random.default_rng(0).standard_normal((2, 6, 4, 4)))
    _, probs, full = seg_head(feats, Tensor(np.zeros((2, 6, 1, 1))), Tensor(np.zeros(2)), 32, 32)
    np.testing.assert_allclose(probs.data, 0.5)
    np.testing.assert_allclose(full.data, 0.5)
    rng = np.random.default_rng(1)
    _, _, full = seg_head(feats, Tensor(rng.standard_normal((2, 6, 1, 1)) * 3), Tensor(rng.standard_normal(2)), 32, 32)
    np.testing.assert_allclose(full.data.sum(axis=1), 1.0, atol=1e-6)
    assert full.shape == (2, 2, 32, 32)


@pytest.mark.parametrize("seed", range(10))
def test_seg_head_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((1, 3, 4, 4))
    gt = rng.integers(0, 2, (1, 16, 16))
    args = [feats, rng.standard_normal((2, 3, 1, 1)), rng.standard_normal(2)]
    fn = lambda f, w, b: cross_entropy(seg_head(f, w, b, 16, 16)[2], gt, axis=1)  # noqa: E731
    assert max(check_gradients(fn, args)) < 1e-4


def test_stage_is_feature_identity_at_init():
    model = small_model(stages=3)
    x = images(2, 32)
    feats = model.features(x).data
    outputs = model(x)
    for out in outputs:
        np.testing.assert_array_equal(out.features_out.data, feats)
        assert out.descriptor.shape == (2, 6, 4)
        np.testing.assert_allclose(out.seg_probs_full.data.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(out.diagnosis.data.sum(axis=1), 1.0, atol=1e-12)


def test_identical_stage_parameters_give_identical_outputs():
    model = small_model(stages=2, share_stages=True)
    a, b = model(images(2, 32))
    np.testing.assert_array_equal(a.seg_probs_full.data, b.seg_probs_full.data)
    np.testing.assert_array_equal(a.diagnosis.data, b.diagnosis.data)
    assert len(model.parameters()) == len(small_model(stages=1).parameters())


def test_stages_are_unshared_by_default():
    model = small_model(stages=3)
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names))
    for i in (1, 2, 3):
        assert f"stage{i}.seg.weight" in names and f"stage{i}.dgff.gate.weight" in names


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_output_length(n):
    assert len(small_model(stages=n, precision="float32")(images(1, 32))) == n


def test_single_stage_matches_manual_composition():
    model = small_model(stages=1)
    x = images(1, 32)
    (out,) = model(x)
    manual = stage_forward(model.features(x), model.stages[0], (32, 32))
    np.testing.assert_array_equal(out.diagnosis.data, manual.diagnosis.data)
    np.testing.assert_array_equal(out.seg_probs_full.data, manual.seg_probs_full.data)


def test_forward_is_deterministic():
    x = images(2)
    a = CascadeNet(ModelConfig(), seed=5)(x)
    b = CascadeNet(ModelConfig(), seed=5)(x)
    for u, v in zip(a, b):
        assert u.seg_probs_full.data.tobytes() == v.seg_probs_full.data.tobytes()
        assert u.diagnosis.data.tobytes() == v.diagnosis.data.tobytes()


def _uniform_outputs(n=1, h=4, w=4):
    probs = Tensor(np.full((n, 2, h, w), 0.5))
    return StageOutputs(probs, probs, probs, Tensor(np.full((n, 2), 0.5)), probs)


def test_total_loss_examples():
    gt = np.random.default_rng(0).integers(0, 2, (1, 4, 4))
    loss = total_loss([_uniform_outputs()], gt, np.array([1]), beta=0.3).item()
    assert loss == pytest.approx(1.3 * math.log(2))
    assert loss == pytest.approx(0.9011, abs=1e-4)
    assert total_loss([_uniform_outputs()], gt, [1], beta=0).item() == pytest.approx(math.log(2))
    one_hot = np.stack([1 - gt, gt], axis=1).astype(float)
    perfect = StageOutputs(None, None, Tensor(one_hot), Tensor(np.array([[0.0, 1.0]])), None)
    assert total_loss([perfect], gt, [1]).item() < 1e-10
    with pytest.raises(Exception):
        total_loss([_uniform_outputs()], np.zeros((1, 5, 5)), [1])


def test_loss_decomposition():
    model = small_model(stages=3)
    x = images(2, 32)
    rng = np.random.default_rng(1)
    seg_gt, cls_gt = rng.integers(0, 2, (2, 32, 32)), np.array([0, 1])
    outputs = model(x)
    cls_terms = sum(cross_entropy(o.diagnosis, cls_gt).item() for o in outputs)
    seg_only = total_loss(outputs, seg_gt, cls_gt, beta=0).item()
    joint = total_loss(outputs, seg_gt, cls_gt, beta=0.3).item()
    assert seg_only + 0.3 * cls_terms == pytest.approx(joint, abs=1e-9)
    final = total_loss(outputs, seg_gt, cls_gt, beta=0.3, supervise="final").item()
    assert final == pytest.approx(total_loss(outputs[-1:], seg_gt, cls_gt, beta=0.3).item(), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_backbone_gradient(seed):
    model = small_model(seed=seed)
    x = images(1, 32, seed)
    weights = [np.random.default_rng(seed + i).standard_normal(s) for i, s in enumerate([(1, 6, 4, 4), (1, 6, 2, 2), (1, 6, 1, 1)])]
    params = [p for block in model.blocks for p in block]

    def loss():
        blocks = model.backbone_forward(x)[2:]
        return sum(((b * Tensor(w)).sum() for b, w in zip(blocks, weights)), Tensor(np.array(0.0)))

    assert directional_check(loss, params, np.random.default_rng(seed)) < 1e-4


def _random_stage(k, rng):
    dg = DgffParams.create("s.dgff", k, 2, rng)
    dg.alpha.data[:] = 0.6
    dg.lam.data[:] = 0.8
    dg.conv1_weight.data = identity_kernel(k) + 0.2 * rng.standard_normal((k, k, 3, 3))
    dg.conv2_weight.data = identity_kernel(k) + 0.2 * rng.standard_normal((k, k, 3, 3))
    return StageParams(
        Parameter("s.seg.weight", rng.standard_normal((2, k, 1, 1))), Parameter("s.seg.bias", rng.standard_normal(2)),
        Parameter("s.cls.weight", rng.standard_normal((2, 4 * k))), Parameter("s.cls.bias", rng.standard_normal(2)),
        dg,
    )


@pytest.mark.parametrize("seed", range(5))
def test_two_stage_gradient_on_8x8_features(seed):
    rng = np.random.default_rng(seed)
    k = 3
    stages = [_random_stage(k, rng), _random_stage(k, rng)]
    feats = rng.uniform(0, 1, (2, k, 8, 8))
    seg_gt, cls_gt = rng.integers(0, 2, (2, 32, 32)), np.array([1, 0])

    def loss_of(f):
        outputs = []
        for st in stages:
            outputs.append(stage_forward(f, st, (32, 32)))
            f = outputs[-1].features_out
        return total_loss(outputs, seg_gt, cls_gt, beta=0.3)

    assert check_gradients(loss_of, [feats])[0] < 1e-4
    params = [p for st in stages for p in st]
    f0 = Tensor(feats)
    assert directional_check(lambda: loss_of(f0), params, rng) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_full_single_stage_model_gradient(seed):
    model = small_model(stages=1, seed=seed)
    rng = np.random.default_rng(seed)
    # nonzero biases keep lesion probabilities off the 0.5 threshold, where
    # the thresholded mask makes the loss discontinuous
    for p in model.parameters():
        if p.name.endswith("bias"):
            p.data = rng.uniform(-0.1, 0.1, p.shape)
    # non-identity DGFF so every parameter influences the loss
    model.stages[0].dgff.alpha.data[:] = 0.5
    x = images(1, 32, seed)
    with no_grad():
        assert np.abs(model(x)[0].seg_probs.data[:, 1] - 0.5).min() > 1e-3
    seg_gt, cls_gt = rng.integers(0, 2, (1, 32, 32)), np.array([1])
    loss = lambda: total_loss(model(x), seg_gt, cls_gt, beta=0.3)  # noqa: E731
    params = model.parameters()
    assert directional_check(loss, params, rng) < 1e-4
    # coordinate-wise check on a handful of entries of the stage parameters
    stage_params = list(model.stages[0])[:4]
    for p in stage_params:
        idx = tuple(rng.integers(0, s) for s in p.shape)
        orig = p.data[idx]
        p.grad = None
        backward(loss(), params)
        analytic = p.grad[idx]
        p.data[idx] = orig + 1e-6
        up = loss().item()
        p.data[idx] = orig - 1e-6
        down = loss().item()
        p.data[idx] = orig
        numeric = (up - down) / 2e-6
        assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), abs(analytic), 1e-8)


def test_config_validation():
    for bad in (dict(num_stages=0), dict(beta=-1), dict(block_channels=(1, 2, 3)), dict(pooling="max"), dict(precision="f16")):
        with pytest.raises(ConfigurationError):
            ModelConfig(**bad)
    cfg = ModelConfig(num_stages=2)
    assert ModelConfig(**cfg.to_dict()) == cfg
