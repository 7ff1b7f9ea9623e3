from __future__ import annotations

import numpy as np
import pytest

from satp.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from satp.rng import Rng


def test_roundtrip_is_bit_exact(tmp_path) -> None:
    rng = Rng(0)
    params = {"a.w": rng.normal(size=(4, 3)), "a.b": rng.normal(size=(3,)),
              "scalarish": rng.normal(size=())}
    buffers = {"norm.mean": rng.normal(size=(5,))}
    meta = {"config_digest": "abc123", "stage": "predictor", "seed": 7, "epoch": 3}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, buffers, meta)
    p2, b2, m2 = load_checkpoint(path)
    assert m2 == meta
    for k, v in params.items():
        assert p2[k].shape == np.asarray(v).shape
        assert p2[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()
    assert b2["norm.mean"].tobytes() == buffers["norm.mean"].tobytes()


def test_rewrite_produces_identical_bytes(tmp_path) -> None:
    params = {"w": np.linspace(0, 1, 12).reshape(3, 4)}
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, params, {}, {"config_digest": "x", "seed": 0})
    save_checkpoint(b, params, {}, {"config_digest": "x", "seed": 0})
    assert a.read_bytes() == b.read_bytes()


def test_digest_mismatch_rejected_unless_forced(tmp_path) -> None:
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.zeros(2)}, {}, {"config_digest": "right"})
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path, expected_digest="wrong")
    params, _, _ = load_checkpoint(path, expected_digest="wrong", force=True)
    assert "w" in params


def test_corrupt_inputs_are_rejected(tmp_path) -> None:
    missing = tmp_path / "none.ckpt"
    with pytest.raises(CheckpointError, match="no such file"):
        load_checkpoint(missing)
    bad_magic = tmp_path / "bad.ckpt"
    bad_magic.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad_magic)
    truncated = tmp_path / "trunc.ckpt"
    save_checkpoint(truncated, {"w": np.zeros(100)}, {}, {})
    data = truncated.read_bytes()
    truncated.write_bytes(data[:len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)
