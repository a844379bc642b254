"""Checkpoint files: magic, a JSON header, then raw little-endian float64 arrays."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelConfig, PointNetKL

MAGIC = b"PNKL1"


class CheckpointError(ValueError):
    pass


def _arrays(model: PointNetKL):
    out = [(k, v) for k, v in sorted(model.params.items())]
    for k in sorted(model.running):
        for s in ("mean", "var"):
            out.append((f"running:{k}:{s}", model.running[k][s]))
    return out


def save_checkpoint(model: PointNetKL, path, episode: int = -1,
                    best_val_loss: float | None = None, extra: dict | None = None) -> None:
    arrays = _arrays(model)
    header = {
        "config": asdict(model.cfg),
        "seed": model.seed,
        "arrays": [[k, list(v.shape)] for k, v in arrays],
        "episode": int(episode),
        "best_val_loss": None if best_val_loss is None else float(best_val_loss),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, v in arrays:
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(model, header)``."""
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    try:
        (n,) = struct.unpack_from("<Q", data, 5)
        header = json.loads(data[13:13 + n])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    cfg = ModelConfig(**header["config"])
    pos = 13 + n
    params, running = {}, {}
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated at {name}")
        arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(float)
        pos += size
        if name.startswith("running:"):
            _, key, stat = name.split(":")
            running.setdefault(key, {})[stat] = arr
        else:
            params[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    model = PointNetKL(cfg, header.get("seed", 0), params, running)
    return model, header
