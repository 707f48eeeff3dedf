import struct

import numpy as np
import pytest

from numis.checkpoint import MAGIC, CheckpointError, ModelCheckpoint, build_model, load_checkpoint, save_checkpoint
from numis.cnn import CnnModel, tiny_config
from numis.vit import ViTConfig, ViTModel

TINY_VIT = ViTConfig(image_size=32, patch_size=8, depth=2, heads=2, d_model=32, d_ff=64, num_labels=3)


def _ckpt(model, epoch=4):
    stats = {"val": {"loss": 0.25, "f1": None, "tp": 3}, "train": {"loss": float("nan")}}
    return ModelCheckpoint(epoch, model.state_dict(), stats, {"kind": model.kind, "config": model.config_dict(), "concepts": ["a", "b", "c"]})


@pytest.mark.parametrize("model", [ViTModel(TINY_VIT, seed=1), CnnModel(tiny_config(), seed=1)], ids=["vit", "cnn"])
def test_save_load_save_is_byte_identical(tmp_path, model):
    first = save_checkpoint(_ckpt(model), tmp_path / "a.ckpt")
    loaded = load_checkpoint(first)
    second = save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert first.read_bytes() == second.read_bytes()
    assert loaded.epoch == 4 and loaded.stats["val"]["tp"] == 3
    assert list(loaded.params) == list(model.state_dict())


@pytest.mark.parametrize("model", [ViTModel(TINY_VIT, seed=2), CnnModel(tiny_config(), seed=2)], ids=["vit", "cnn"])
def test_rebuilt_model_gives_identical_logits(tmp_path, model):
    batch = np.random.default_rng(0).random((5, 32, 32)).astype(np.float32)
    before = model.forward(batch).data
    path = save_checkpoint(_ckpt(model), tmp_path / "m.ckpt")
    again = build_model(load_checkpoint(path))
    np.testing.assert_array_equal(again.forward(batch).data, before)


def test_truncated_file(tmp_path):
    raw = _ckpt(ViTModel(TINY_VIT, seed=3)).to_bytes()
    for cut in (4, len(MAGIC) + 6, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError, match="truncated|magic"):
            load_checkpoint(tmp_path / "t.ckpt")


def test_bad_magic_and_version(tmp_path):
    raw = _ckpt(CnnModel(tiny_config(), seed=3)).to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        ModelCheckpoint.from_bytes(b"XXXXXXXX" + raw[8:])
    bumped = raw[:8] + struct.pack("<I", 2) + raw[12:]
    with pytest.raises(CheckpointError, match="version 2"):
        ModelCheckpoint.from_bytes(bumped)
    with pytest.raises(CheckpointError, match="trailing"):
        ModelCheckpoint.from_bytes(raw + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_unknown_model_kind():
    with pytest.raises(CheckpointError, match="kind"):
        build_model(ModelCheckpoint(0, {}, {}, {"kind": "mlp"}))


def test_arrays_are_little_endian_f32():
    ck = ModelCheckpoint(0, {"w": np.array([[1.5, -2.0]], np.float64)})
    raw = ck.to_bytes()
    assert raw.endswith(np.array([1.5, -2.0], "<f4").tobytes())
    back = ModelCheckpoint.from_bytes(raw)
    assert back.params["w"].dtype == np.float32 and back.params["w"].shape == (1, 2)
