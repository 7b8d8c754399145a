"""``.ihvsm`` model checkpoints.

Layout (little-endian)::

    8 bytes  magic b"IHVSMDL1"
    u32      header length H
    H bytes  UTF-8 JSON header (sorted keys): format version, architecture hash,
             model hyperparameters, training step, and a tensor table of
             {name, shape, offset, nbytes}; offsets are relative to the payload
    payload  float32 tensors, row-major, concatenated in table order
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from .model import IHVSModel, ModelConfig, architecture_hash, build_model

MAGIC = b"IHVSMDL1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: IHVSModel, step: int = 0, extra: Optional[dict] = None) -> bytes:
    table, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        b = t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    payload = b"".join(blobs)
    header = {
        "version": VERSION,
        "arch_hash": architecture_hash(model),
        "model": model.cfg.to_dict(),
        "step": int(step),
        "tensors": table,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(hb)) + hb + payload


def save_checkpoint(model: IHVSModel, path, step: int = 0, extra: Optional[dict] = None) -> None:
    Path(path).write_bytes(dumps(model, step, extra))


def loads(data: bytes, expected_arch: Optional[str] = None) -> Tuple[IHVSModel, dict]:
    if data[:8] != MAGIC or len(data) < 12:
        raise CheckpointError("bad magic")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unparseable header: {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    payload = data[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("payload checksum mismatch")
    model = build_model(ModelConfig.from_dict(header["model"]))
    arch = architecture_hash(model)
    if header["arch_hash"] != arch or (expected_arch is not None and expected_arch != arch):
        raise CheckpointError(f"architecture hash mismatch: file {header['arch_hash']}, "
                              f"expected {expected_arch or arch}")
    state = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        state[entry["name"]] = torch.from_numpy(
            np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(entry["shape"]).copy())
    model.load_state_dict(state)
    return model, header


def load_checkpoint(path, expected_arch: Optional[str] = None) -> Tuple[IHVSModel, dict]:
    return loads(Path(path).read_bytes(), expected_arch)
