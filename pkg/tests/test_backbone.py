import numpy as np
import pytest

from multibreath import autodiff as ad
from multibreath.autodiff import Tensor, gradient_check
from multibreath.backbone import BackboneConfig, forward_features, init_backbone, init_running_stats, parameter_count
from multibreath.errors import ShapeError
from multibreath.model import MultiBreathModel
from multibreath.csra import CsraHeadConfig


def run(cfg, x, mode="eval", seed=0):
    params = init_backbone(cfg, seed)
    return forward_features(params, Tensor(x), cfg, init_running_stats(cfg), mode)


def test_default_shape_law():
    cfg = BackboneConfig()
    with ad.no_grad():
        out = run(cfg, np.random.default_rng(0).standard_normal((1, 1, 64, 256)).astype(np.float32))
    assert out.shape == (1, 512, 4, 16)


def test_batch_dimension_carried():
    cfg = BackboneConfig(widths=(8, 16, 32, 64))
    with ad.no_grad():
        out = run(cfg, np.zeros((64, 1, 64, 256), np.float32))
    assert out.shape == (64, 64, 4, 16)


def test_three_blocks():
    cfg = BackboneConfig(widths=(4, 8, 12))
    with ad.no_grad():
        out = run(cfg, np.zeros((2, 1, 64, 256), np.float32))
    assert out.shape == (2, 12, 8, 32)


@pytest.mark.parametrize("widths,hw", [((3,), (6, 10)), ((2, 3), (8, 12)), ((2, 2, 2, 2, 2), (32, 64))])
def test_halving_rule(widths, hw):
    cfg = BackboneConfig(widths=widths)
    with ad.no_grad():
        out = run(cfg, np.ones((1, 1) + hw, np.float32))
    k = 2 ** len(widths)
    assert out.shape == (1, widths[-1], hw[0] // k, hw[1] // k)


def test_indivisible_input():
    with pytest.raises(ShapeError):
        run(BackboneConfig(widths=(4, 8)), np.zeros((1, 1, 10, 32), np.float32))


def test_parameter_count_closed_form():
    cfg = BackboneConfig()
    widths = [1, 64, 128, 256, 512]
    expected = sum(widths[i + 1] * widths[i] * 25 + 2 * widths[i + 1] for i in range(4))
    assert parameter_count(cfg) == expected == init_backbone(cfg, 0).num_values()


def test_init_deterministic_and_bn_constants():
    cfg = BackboneConfig(widths=(4, 8))
    a, b = init_backbone(cfg, 3), init_backbone(cfg, 3)
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()
    assert np.all(a["backbone.block0.bn.gamma"].data == 1) and np.all(a["backbone.block1.bn.beta"].data == 0)
    w = a["backbone.block1.conv.weight"].data
    assert np.abs(w).max() <= np.sqrt(6 / (4 * 25))
    c = init_backbone(cfg, 4)
    assert a["backbone.block0.conv.weight"].data.tobytes() != c["backbone.block0.conv.weight"].data.tobytes()


def test_eval_mode_pure():
    cfg = BackboneConfig(widths=(4, 8))
    params, stats = init_backbone(cfg, 1), init_running_stats(cfg)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 16, 32)).astype(np.float32))
    with ad.no_grad():
        a = forward_features(params, x, cfg, stats, "eval").data
        b = forward_features(params, x, cfg, stats, "eval").data
    assert a.tobytes() == b.tobytes()


def test_standardisation_applied():
    x = np.random.default_rng(0).standard_normal((2, 1, 16, 32)) * 3 + 5
    raw = BackboneConfig(widths=(4,))
    scaled = BackboneConfig(widths=(4,), input_mean=5.0, input_std=3.0)
    with ad.no_grad():
        a = run(raw, (x - 5) / 3, "eval").data
        b = run(scaled, x, "eval").data
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tiny_backbone_gradient(seed):
    cfg = BackboneConfig(widths=(4, 8))
    params = init_backbone(cfg, seed, dtype=np.float64)
    stats = init_running_stats(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 1, 16, 32)), requires_grad=True)
    proj = Tensor(rng.standard_normal((1, 8, 4, 8)))
    rep = gradient_check(lambda: ad.sum(ad.mul(forward_features(params, x, cfg, stats, "train"), proj)),
                         {**dict(params.items()), "x": x})
    assert rep.worst < 1e-4, rep.max_rel_error


def test_model_rejects_mismatched_head():
    with pytest.raises(ValueError):
        MultiBreathModel(BackboneConfig(widths=(4, 8)), CsraHeadConfig(feature_dim=16))


def test_gradcheck_case_avoids_relu_kink():
    # seed 8 first draws an input with a ReLU argument ~5e-6 from zero
    from multibreath.gradcheck import _relu_margin, backbone_case
    _, params = backbone_case(8)
    backbone = {k: v for k, v in params.items() if k != "input"}
    assert _relu_margin(backbone, params["input"], BackboneConfig(widths=(4, 8))) >= 2e-4
