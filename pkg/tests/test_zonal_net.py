import numpy as np
import pytest

from zonalseg.autodiff import ShapeError, Tensor, no_grad
from zonalseg.losses_metrics import cross_entropy_loss
from zonalseg.autodiff import ops
from zonalseg.zonal_net import (
    ModelConfig,
    build_decoder,
    build_fpa,
    build_improved_resnet50,
    build_model,
    build_unet_baseline,
    forward_segment,
)


def _x(n, size, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((n, 1, size, size)).astype(np.float32))


def _trace(model, x):
    with no_grad():
        feats = model.encoder(x)
        logits = model.decoder(model.fpa(feats))
    return feats.shape, logits


def test_full_width_contract():
    cfg = ModelConfig(width_multiplier=1.0, input_size=192)
    model = build_model(cfg)
    model.train()
    feats, logits = _trace(model, _x(2, 192))
    assert feats == (2, 2048, 24, 24)
    assert logits.shape == (2, 3, 192, 192)
    probs = ops.softmax_channel(logits).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_maxpool_ablation_contract():
    cfg = ModelConfig(width_multiplier=0.25, input_size=192, include_initial_maxpool=True)
    model = build_model(cfg).train()
    feats, logits = _trace(model, _x(2, 192))
    assert feats[2:] == (12, 12)
    assert logits.shape == (2, 3, 192, 192)


def test_unet_contract():
    model = build_unet_baseline(ModelConfig(width_multiplier=0.25, input_size=64)).train()
    probs, labels = forward_segment(model, _x(2, 64).data)
    assert probs.shape == (2, 3, 64, 64)
    assert labels.shape == (2, 64, 64) and labels.dtype == np.uint8
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_unet_rejects_bad_size():
    with pytest.raises(ValueError, match="16"):
        build_unet_baseline(ModelConfig(input_size=200))


def test_encoder_stride_and_channels():
    enc = build_improved_resnet50(ModelConfig(width_multiplier=0.25, input_size=96))
    assert enc.out_channels == 512 and enc.output_stride == 8
    with no_grad():
        assert enc(_x(2, 96)).shape == (2, 512, 12, 12)


@pytest.mark.parametrize("blocks", [2, 3])
def test_layer4_block_layout(blocks):
    enc = build_improved_resnet50(ModelConfig(width_multiplier=0.25, input_size=96, layer4_blocks=blocks))
    kinds = [type(b).__name__ for b in enc.layer4]
    assert kinds == ["BasicBlock"] + ["Bottleneck"] * (blocks - 1)
    assert all(b.conv2[0].dilation == 2 for b in list(enc.layer4)[1:])


def test_layer4_dilation_keeps_resolution():
    enc = build_improved_resnet50(ModelConfig(width_multiplier=0.25, input_size=64))
    with no_grad():
        before = enc.layer3(enc.layer2(enc.layer1(enc.stem(_x(1, 64)))))
        after = enc.layer4(before)
    assert before.shape[2:] == after.shape[2:] == (8, 8)


def test_fpa_shape_and_minimum():
    fpa = build_fpa(32, 16).train()
    with no_grad():
        assert fpa(Tensor(_x(2, 8).data.repeat(32, axis=1))).shape == (2, 16, 8, 8)
        assert fpa(Tensor(np.ones((2, 32, 13, 13), np.float32))).shape == (2, 16, 13, 13)
    with pytest.raises(ShapeError):
        fpa(Tensor(np.ones((2, 32, 6, 6), np.float32)))


def test_fpa_rejects_zero_channels():
    with pytest.raises(ValueError):
        build_fpa(0, 16)


def test_decoder_output_size():
    dec = build_decoder(16, 3, 8).train()
    with no_grad():
        assert dec(Tensor(np.ones((2, 16, 6, 6), np.float32))).shape == (2, 3, 48, 48)
    with pytest.raises(ValueError):
        build_decoder(16, 4)


@pytest.mark.parametrize("kwargs", [dict(width_multiplier=0.0), dict(width_multiplier=1.5),
                                    dict(input_size=100), dict(num_classes=4),
                                    dict(arch="segnet"), dict(layer4_blocks=5),
                                    dict(include_initial_maxpool=True, input_size=120)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        build_model(ModelConfig(**kwargs))


def test_wrong_input_rejected():
    model = build_model(ModelConfig(width_multiplier=0.25, input_size=96))
    with pytest.raises(ShapeError):
        model(_x(1, 64))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 2, 96, 96), np.float32)))


def test_eval_before_stats_fails_then_works():
    model = build_model(ModelConfig(width_multiplier=0.25, input_size=64)).eval()
    with pytest.raises(RuntimeError):
        forward_segment(model, _x(1, 64).data)
    model.init_running_stats()
    probs, _ = forward_segment(model, _x(1, 64).data)
    assert probs.shape == (1, 3, 64, 64)


def test_construction_is_seeded():
    a = build_model(ModelConfig(width_multiplier=0.25, input_size=64, seed=3))
    b = build_model(ModelConfig(width_multiplier=0.25, input_size=64, seed=3))
    c = build_model(ModelConfig(width_multiplier=0.25, input_size=64, seed=4))
    pa, pb, pc = a.parameters(), b.parameters(), c.parameters()
    assert all(np.array_equal(x.data, y.data) for x, y in zip(pa, pb))
    assert not all(np.array_equal(x.data, y.data) for x, y in zip(pa, pc))


@pytest.mark.parametrize("arch", ["proposed", "unet_baseline"])
def test_every_parameter_reached(arch):
    cfg = ModelConfig(width_multiplier=0.25, input_size=64, arch=arch)
    model = build_model(cfg).train()
    rng = np.random.default_rng(0)
    x = _x(2, 64)
    y = rng.integers(0, 3, (2, 64, 64))
    cross_entropy_loss(ops.softmax_channel(model(x)), y).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def _zero_params(module):
    for p in module.parameters():
        p.data[...] = 0


def test_fpa_zero_weights_annihilate():
    fpa = build_fpa(16, 8).train()
    _zero_params(fpa)
    with no_grad():
        out = fpa(Tensor(np.random.default_rng(0).standard_normal((1, 16, 9, 9)).astype(np.float32)))
    assert not out.data.any()


def test_zero_decoder_gives_uniform_softmax():
    model = build_model(ModelConfig(width_multiplier=0.25, input_size=64)).train()
    _zero_params(model.decoder)
    probs, _ = forward_segment(model, _x(1, 64).data)
    np.testing.assert_allclose(probs, 1 / 3, atol=1e-7)


def test_zero_unet_gives_uniform_softmax():
    model = build_unet_baseline(ModelConfig(width_multiplier=0.25, input_size=32)).train()
    _zero_params(model)
    probs, _ = forward_segment(model, _x(1, 32).data)
    np.testing.assert_allclose(probs, 1 / 3, atol=1e-7)


def test_argmax_label():
    logits = np.array([2.0, 1.0, 0.0], np.float32).reshape(1, 3, 1, 1)
    assert np.argmax(ops.softmax_channel(Tensor(logits)).data, axis=1).item() == 0


def test_duplicate_batch_rows_identical_in_eval():
    model = build_model(ModelConfig(width_multiplier=0.25, input_size=64))
    model.init_running_stats()
    model.eval()
    x = _x(1, 64).data
    probs, labels = forward_segment(model, np.concatenate([x, x]))
    assert probs[0].tobytes() == probs[1].tobytes()
    assert (labels[0] == labels[1]).all()
