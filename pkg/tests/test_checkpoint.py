import numpy as np
import pytest

from latentsing.checkpoint import load_checkpoint, save_checkpoint
from latentsing.config import Config
from latentsing.errors import CheckpointError, CompatibilityError


@pytest.fixture
def tensors():
    rng = np.random.default_rng(0)
    return {
        "weights.a": rng.standard_normal((3, 4)).astype(np.float32),
        "weights.b": rng.standard_normal(7),  # float64
        "counts": np.arange(5, dtype=np.int64),
    }


def test_roundtrip(tmp_path, tensors):
    cfg = Config()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "vae", cfg, tensors, extras={"step": 12, "note": "x"})
    ckpt = load_checkpoint(path)
    assert ckpt.kind == "vae"
    assert ckpt.config == cfg
    assert ckpt.extras == {"step": 12, "note": "x"}
    for name, arr in tensors.items():
        np.testing.assert_array_equal(ckpt.tensors[name], arr)
        assert ckpt.tensors[name].dtype == arr.dtype


def test_deterministic_bytes(tmp_path, tensors):
    cfg = Config()
    save_checkpoint(tmp_path / "a.ckpt", "vae", cfg, tensors, extras={"step": 1})
    save_checkpoint(tmp_path / "b.ckpt", "vae", cfg, tensors, extras={"step": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_refuses_non_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"this is not a checkpoint at all")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_missing_file():
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint("/nonexistent/m.ckpt")


def test_hash_mismatch_refused(tmp_path, tensors):
    cfg = Config()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "vae", cfg, tensors)
    with pytest.raises(CompatibilityError, match="config hash"):
        load_checkpoint(path, expected_hash="deadbeefdeadbeef")
    # matching hash loads fine
    load_checkpoint(path, expected_hash=cfg.config_hash())


def test_tampered_config_refused(tmp_path, tensors):
    cfg = Config()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "vae", cfg, tensors)
    raw = bytearray(path.read_bytes())
    # flip a digit inside the stored config text
    idx = raw.find(b"32000")
    raw[idx:idx + 5] = b"32001"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="does not match stored"):
        load_checkpoint(path)
