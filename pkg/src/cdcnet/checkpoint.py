"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"CDCNCKPT"
    uint32    format version
    uint32    header length in bytes
    header    UTF-8 JSON: {"version", "model_config", "tensors": [...], "meta"}
    payload   every tensor as little-endian float32, in header order

Each ``tensors`` entry is ``{"name", "shape", "offset"}`` with ``offset`` in
bytes from the start of the payload.  Parameters and normalisation running
statistics are both stored.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import ModelConfig, build_model

MAGIC = b"CDCNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path, meta: dict | None = None) -> Path:
    path = Path(path)
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name, arr in state.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "version": VERSION,
            "model_config": model.cfg.to_dict(),
            "tensors": entries,
            "meta": meta or {},
        }
    ).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a cdcnet checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(data)[16 + hlen :]
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past the end of the file")
        arr = np.frombuffer(payload[e["offset"] : end], dtype="<f4").astype(np.float32)
        tensors[e["name"]] = arr.reshape(e["shape"])
    return header, tensors


def load_checkpoint(path):
    """Rebuild the model from the stored config and load its weights."""
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = build_model(cfg)
    try:
        model.load_state_dict(tensors)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    model.eval()
    return model, header.get("meta", {})
