"""Binary tensor checkpoints.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON header
mapping tensor name -> {dtype, shape, offset, length}, then the raw
little-endian float32 payloads back to back. Offsets are relative to the
first payload byte, ascending, with no padding. An optional ``__metadata__``
entry carries string-keyed JSON (model config, adapter config).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .adapters import (
    adapter_config_from_json, adapter_config_to_json, adapter_state, attach_adapter,
    load_adapter_state,
)
from .model import Model, ModelConfig
from .tensor import Parameter

_DTYPES = {"F32": np.dtype("<f4")}
METADATA_KEY = "__metadata__"


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    header: dict = {}
    if metadata is not None:
        header[METADATA_KEY] = metadata
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        if name == METADATA_KEY:
            raise CheckpointError(f"{METADATA_KEY!r} is reserved")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES["F32"]).tobytes()
        header[name] = {"dtype": "F32", "shape": list(np.shape(arr)), "offset": offset,
                        "length": len(raw)}
        payloads.append(raw)
        offset += len(raw)
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(payloads)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint: missing header length")
    (n,) = struct.unpack("<Q", buf[:8])
    if 8 + n > len(buf):
        raise CheckpointError(f"header length {n} exceeds file size {len(buf)}")
    header = json.loads(buf[8:8 + n].decode("utf-8"))
    meta = header.pop(METADATA_KEY, None)
    base = 8 + n
    out = {}
    prev_end = 0
    for name, info in header.items():
        dt = _DTYPES.get(info["dtype"])
        if dt is None:
            raise CheckpointError(f"{name}: unsupported dtype {info['dtype']}")
        off, length = info["offset"], info["length"]
        if off < prev_end:
            raise CheckpointError(f"{name}: offsets must ascend without overlap")
        count = int(np.prod(info["shape"], dtype=np.int64))
        if length != count * dt.itemsize or base + off + length > len(buf):
            raise CheckpointError(f"{name}: payload bounds inconsistent with shape {info['shape']}")
        out[name] = np.frombuffer(buf, dtype=dt, count=count, offset=base + off).reshape(
            info["shape"]).astype(np.float32)
        prev_end = off + length
    return out, meta


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors, metadata))
    return path


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict | None]:
    return decode(Path(path).read_bytes())


def save_model(path, model) -> Path:
    """Base (or merged) weights plus the model config."""
    meta = {"kind": "model", "model_config": model.config.to_dict()}
    return save(path, {k: p.data for k, p in model.params.items()}, meta)


def load_model(path, dtype=np.float32):
    tensors, meta = load(path)
    if not meta or meta.get("kind") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint")
    config = ModelConfig.from_dict(meta["model_config"])
    return Model(config, {k: Parameter(v.astype(dtype)) for k, v in tensors.items()})


def save_adapter(path, model, tensors: dict[str, np.ndarray] | None = None) -> Path:
    """Adapter-only checkpoint; ``tensors`` overrides the live adapter parameters."""
    if model.adapter is None:
        raise CheckpointError("model has no adapter to save")
    meta = {"kind": "adapter", "adapter_config": adapter_config_to_json(model.adapter.cfg),
            "model_config": model.config.to_dict()}
    return save(path, adapter_state(model) if tensors is None else tensors, meta)


def load_adapter(path, model):
    """Attach the checkpoint's adapter to ``model`` and load its tensors."""
    tensors, meta = load(path)
    if not meta or meta.get("kind") != "adapter":
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    attach_adapter(model, adapter_config_from_json(meta["adapter_config"]))
    load_adapter_state(model, tensors)
    return model
