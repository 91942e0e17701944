"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic   4 bytes  b"AAUN"
    version u32
    hdr_len u64      length of the JSON header
    header  bytes    UTF-8 JSON; always carries "model_config", training
                     checkpoints add "train" (step, best val Dice, config)
    records          repeated until EOF:
        name_len u32, name bytes (UTF-8),
        rank u32, dims rank x u64,
        payload: prod(dims) float32 values

Float payloads are written verbatim from float32 tensors, so a save/load
round trip is bit-exact.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"AAUN"
VERSION = 1


def write_checkpoint(path, header: dict, tensors: dict):
    """``tensors`` maps record names to float32 numpy arrays."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path):
    """Returns (header dict, {name: float32 array})."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    view = memoryview(data)
    if len(data) < 16 or bytes(view[:4]) != MAGIC:
        raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    (hdr_len,) = struct.unpack_from("<Q", view, 8)
    pos = 16
    try:
        header = json.loads(bytes(view[pos:pos + hdr_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc
    pos += hdr_len
    tensors = {}
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            tensors[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint records in {path}: {exc}") from exc
    return header, tensors


def save_model_checkpoint(path, model, train_state: dict | None = None):
    """Persist model parameters (and optional optimizer moments) with a config echo."""
    header = {"model_config": model.cfg.to_dict()}
    tensors = {}
    for name, p in model.named_parameters():
        tensors[f"param.{name}"] = p.detach().cpu().numpy().astype("<f4")
    if train_state is not None:
        header["train"] = {k: v for k, v in train_state.items() if k != "moments"}
        for name, (m, v) in train_state.get("moments", {}).items():
            tensors[f"adam_m.{name}"] = m.detach().cpu().numpy().astype("<f4")
            tensors[f"adam_v.{name}"] = v.detach().cpu().numpy().astype("<f4")
    write_checkpoint(path, header, tensors)


def load_model_checkpoint(path):
    """Returns (model with restored parameters, header, raw tensors)."""
    from .model import AllAttentionUNet, ModelConfig

    header, tensors = read_checkpoint(path)
    if "model_config" not in header:
        raise CheckpointError(f"checkpoint header lacks model_config: {path}")
    cfg = ModelConfig.from_dict(header["model_config"])
    model = AllAttentionUNet(cfg, seed=0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint/config mismatch: missing record '{key}' in {path}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"checkpoint/config mismatch on '{name}': record shape {tuple(arr.shape)} "
                    f"vs model shape {tuple(p.shape)} in {path}"
                )
            p.copy_(torch.from_numpy(arr.copy()))
    return model, header, tensors
