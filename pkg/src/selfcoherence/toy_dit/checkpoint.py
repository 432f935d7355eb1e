"""SCGTOY1 checkpoints.

Layout: ``b"SCGTOY1"``, a little-endian u32 manifest length, the UTF-8 JSON
manifest ``{"config": ..., "extra": ..., "tensors": [{"name", "shape"}, ...]}``,
then each tensor's little-endian float32 payload in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ToyModel

MAGIC = b"SCGTOY1"
_LEN = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ToyModel, path, extra: dict | None = None) -> None:
    state = model.state_dict()
    manifest = {
        "config": model.config.to_dict(),
        "extra": extra or {},
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in state.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(blob)))
        f.write(blob)
        for t in state.values():
            f.write(np.ascontiguousarray(t.detach().numpy(), dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ToyModel, dict]:
    """Return ``(model, extra)``; the model is in eval mode."""
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an SCGTOY1 checkpoint")
    pos = len(MAGIC)
    if len(raw) < pos + _LEN.size:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = _LEN.unpack_from(raw, pos)
    pos += _LEN.size
    try:
        manifest = json.loads(raw[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    pos += n
    model = ToyModel(ModelConfig.from_dict(manifest["config"]))
    expected = model.state_dict()
    state = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected or tuple(expected[name].shape) != shape:
            raise CheckpointError(f"{path}: tensor {name} {shape} does not fit the model")
        count = int(np.prod(shape, dtype=np.int64))
        if len(raw) < pos + 4 * count:
            raise CheckpointError(f"{path}: payload for {name} truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * count
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    model.load_state_dict(state)
    model.eval()
    return model, manifest.get("extra", {})
