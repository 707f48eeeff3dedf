import numpy as np
import pytest

from numis.cnn import CnnConfig, CnnModel, ConvBlock, detect_dying_relu, tiny_config
from numis.tensor import ShapeError


def test_output_is_two_raw_logits():
    model = CnnModel(tiny_config(), seed=0)
    imgs = np.random.default_rng(0).random((3, 32, 32))
    assert model.forward(imgs).shape == (3, 2)
    assert model.forward(imgs[0]).shape == (2,)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((3, 28, 28)))


def test_zero_image_through_zero_bias_net_gives_final_bias():
    model = CnnModel(tiny_config(), seed=1)
    model.params["out.bias"].data[...] = [0.25, -0.75]
    np.testing.assert_array_equal(model.forward(np.zeros((32, 32))).data, [0.25, -0.75])


def test_final_layer_has_no_relu():
    model = CnnModel(tiny_config(), seed=2)
    model.params["out.bias"].data[...] = -50.0
    acts = []
    logits = model.forward(np.random.default_rng(2).random((4, 32, 32)), activations=acts)
    assert np.all(logits.data < 0)
    assert all(np.all(a >= 0) for _, a in acts)
    with pytest.raises(ValueError):
        CnnConfig(final_activation="relu")


def test_default_topology():
    cfg = CnnConfig()
    assert [b.out_channels for b in cfg.conv_blocks] == [32, 64, 128]
    assert cfg.fc_widths == (256, 64)
    assert cfg.feature_shape() == (128, 28, 28)
    assert CnnConfig(conv_blocks=[(8, 3, 1, 2)], image_size=8).conv_blocks == (ConvBlock(8, 3, 1, 2),)


def test_models_share_no_storage():
    a, b = CnnModel(tiny_config(), seed=3), CnnModel(tiny_config(), seed=3)
    for name in a.params:
        assert not np.shares_memory(a.params[name].data, b.params[name].data)


def test_forced_dead_network_is_flagged_everywhere():
    model = CnnModel(tiny_config(), seed=4)
    for name, p in model.params.items():
        if name.endswith(".bias") and not name.startswith("out."):
            p.data[...] = -1e4
    report = detect_dying_relu(model, np.random.default_rng(4).random((8, 32, 32)))
    assert [l.layer for l in report.layers] == ["conv.0", "conv.1", "conv.2", "fc.0", "fc.1"]
    assert all(l.flagged and l.dead_fraction >= 0.99 for l in report.layers)


def test_healthy_init_is_not_flagged():
    model = CnnModel(tiny_config(), seed=5)
    report = detect_dying_relu(model, np.random.default_rng(5).random((16, 32, 32)))
    assert not report.any_flagged
    assert max(l.dead_fraction for l in report.layers) < 0.9


def test_empty_probe_batch():
    with pytest.raises(ValueError):
        detect_dying_relu(CnnModel(tiny_config(), seed=0), np.zeros((0, 32, 32)))
