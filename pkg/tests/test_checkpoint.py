import json

import numpy as np
import pytest

from hipo import checkpoint as ckpt
from hipo import model as lm

CFG = lm.ModelConfig(context_length=16, embed_dim=8, n_layers=1, n_heads=2, vocab_size=11, seed=5)


def test_round_trip_bit_identical(tmp_path):
    params = lm.init_params(CFG)
    ckpt.save_checkpoint(params, tmp_path / "a")
    loaded = ckpt.load_checkpoint(tmp_path / "a")
    assert loaded.config == params.config
    assert list(loaded.tensors) == list(params.tensors)
    for k in params.tensors:
        assert np.array_equal(loaded.tensors[k], params.tensors[k])


def test_save_is_deterministic(tmp_path):
    params = lm.init_params(CFG)
    ckpt.save_checkpoint(params, tmp_path / "a")
    ckpt.save_checkpoint(params, tmp_path / "b")
    assert ckpt.checkpoint_checksum(tmp_path / "a") == ckpt.checkpoint_checksum(tmp_path / "b")


def test_version_mismatch(tmp_path):
    params = lm.init_params(CFG)
    path = ckpt.save_checkpoint(params, tmp_path / "a")
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["format"] = "hipo-ckpt-0"
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ckpt.CheckpointVersionError):
        ckpt.load_checkpoint(path)


def test_corrupt_manifest(tmp_path):
    params = lm.init_params(CFG)
    path = ckpt.save_checkpoint(params, tmp_path / "a")
    (path / "manifest.json").write_text("{not json")
    with pytest.raises(ckpt.CheckpointManifestError):
        ckpt.load_checkpoint(path)


def test_truncated_params(tmp_path):
    params = lm.init_params(CFG)
    path = ckpt.save_checkpoint(params, tmp_path / "a")
    blob = (path / "params.bin").read_bytes()
    (path / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(ckpt.CheckpointTruncatedError):
        ckpt.load_checkpoint(path)


def test_shape_mismatch(tmp_path):
    params = lm.init_params(CFG)
    path = ckpt.save_checkpoint(params, tmp_path / "a")
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["tensors"][0]["shape"] = [1, 1]
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ckpt.CheckpointShapeError):
        ckpt.load_checkpoint(path)
