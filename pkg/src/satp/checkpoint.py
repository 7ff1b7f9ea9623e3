"""Binary model checkpoints: magic "SATP", version, JSON metadata, and a
directory of named float64 little-endian tensors.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SATP"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt file, wrong magic/version, or mismatched configuration digest."""


def _write_tensor(fh, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", array.ndim))
    for dim in array.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError("checkpoint: truncated file")
    return data


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, count * 8), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    meta: dict,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            _write_tensor(fh, name, params[name])
        fh.write(struct.pack("<I", len(buffers)))
        for name in sorted(buffers):
            _write_tensor(fh, name, buffers[name])


def load_checkpoint(
    path: str | Path,
    expected_digest: str | None = None,
    force: bool = False,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint: no such file: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"checkpoint: bad magic in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"checkpoint: unsupported version {version} in {path}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        params = dict(_read_tensor(fh) for _ in range(n_params))
        (n_buffers,) = struct.unpack("<I", _read_exact(fh, 4))
        buffers = dict(_read_tensor(fh) for _ in range(n_buffers))
    if expected_digest is not None and not force:
        found = meta.get("config_digest")
        if found != expected_digest:
            raise CheckpointError(
                f"checkpoint: config digest mismatch in {path}: "
                f"{found} != {expected_digest} (pass force to override)")
    return params, buffers, meta
