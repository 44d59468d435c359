import json

import numpy as np
import pytest
import torch

from transfusion import checkpoint
from transfusion.model import ModelConfig, TransfusionModel, init_params


def test_roundtrip_and_manifest(tmp_path):
    cfg = ModelConfig(layers=1, embed_dim=16, heads=2)
    model = init_params(cfg, 0)
    path = checkpoint.save_model(tmp_path / "ck", model, {"model": cfg.to_dict()}, step=7,
                                 rng_state={"seed": 3}, extra_arrays={"aux/x": np.arange(4.0)})
    arrays, meta = checkpoint.load_arrays(path)
    assert meta["step"] == 7 and meta["rng_state"] == {"seed": 3}
    fresh = TransfusionModel(ModelConfig.from_dict(meta["config"]["model"]))
    fresh.load_state_dict(checkpoint.load_state_dict(arrays))
    for k, v in model.state_dict().items():
        assert torch.equal(v, fresh.state_dict()[k]), k
    np.testing.assert_array_equal(arrays["aux/x"], np.arange(4.0, dtype=np.float32))
    manifest = json.loads((path / "manifest.json").read_text())
    assert all(len(e["sha256"]) == 64 for e in manifest["arrays"].values())


def test_same_state_gives_identical_bytes(tmp_path):
    cfg = ModelConfig(layers=1, embed_dim=16, heads=2)
    a = checkpoint.save_model(tmp_path / "a", init_params(cfg, 1), {"m": 1}, 0)
    b = checkpoint.save_model(tmp_path / "b", init_params(cfg, 1), {"m": 1}, 0)
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_corruption_detected(tmp_path):
    path = checkpoint.save_arrays(tmp_path / "c", {"w": np.ones(3)})
    blob = path / "w.f32"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 1
    blob.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        checkpoint.load_arrays(path)


def test_overwrite_replaces_atomically(tmp_path):
    target = tmp_path / "d"
    checkpoint.save_arrays(target, {"w": np.zeros(2)})
    checkpoint.save_arrays(target, {"w": np.ones(2)})
    arrays, _ = checkpoint.load_arrays(target)
    np.testing.assert_array_equal(arrays["w"], np.ones(2))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["d"]
