"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"VLE2" | u32 version | u32 header_len | header JSON | float32 payload

The header holds free-form metadata, a tensor directory (name, shape,
byte offset into the payload) and a CRC32 of the payload. Files are
written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

MAGIC = b"VLE2"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def save_checkpoint(tensors: dict, meta: dict, path) -> None:
    path = Path(path)
    directory, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_to_numpy(tensors[name]), dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    header = json.dumps(
        {"meta": meta, "tensors": directory, "payload_bytes": len(payload),
         "payload_crc32": zlib.crc32(payload)},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    blob = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.chmod(tmp, 0o666 & ~_umask())  # mkstemp creates 0600 files
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; tensors are float32 numpy arrays."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise CheckpointError(f"{path}: header runs past end of file at offset {start + hlen}")
    try:
        header = json.loads(data[start:start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header at offset {start}: {exc}") from exc
    payload = data[start + hlen:]
    expected = header["payload_bytes"]
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload at offset {start + hlen} is {len(payload)} bytes, expected {expected}"
        )
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        off = entry["offset"]
        if off < 0 or off + n > len(payload):
            raise CheckpointError(
                f"{path}: tensor {entry['name']} {shape} at payload offset {off} overruns {len(payload)} bytes"
            )
        tensors[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=off).reshape(shape)
    return tensors, header["meta"]


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().float().numpy()
    return np.asarray(t, dtype=np.float32)


# -- models -------------------------------------------------------------------


def model_meta(model, step: int = 0) -> dict:
    meta = {
        "kind": model.kind,
        "world": asdict(model.world),
        "world_hash": model.world.digest(),
        "model": asdict(model.cfg),
        "step": int(step),
    }
    if model.kind == "ar":
        meta["group_size"] = model.group_size
    return meta


def save_model(model, path, step: int = 0) -> None:
    save_checkpoint(model.state_dict(), model_meta(model, step), path)


def load_model(path, kind: Optional[str] = None):
    """Rebuild an AR or NAR model from a checkpoint; ``kind`` guards against mix-ups."""
    from .ar import ARModel
    from .config import ModelConfig
    from .nar import NARModel
    from .world import WorldConfig

    tensors, meta = load_checkpoint(path)
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{path}: model kind mismatch (expected {kind}, found {meta.get('kind')})")
    world = WorldConfig(**meta["world"])
    cfg = ModelConfig(**meta["model"])
    if meta["kind"] == "ar":
        model = ARModel(world, cfg, meta["group_size"])
    elif meta["kind"] == "nar":
        model = NARModel(world, cfg)
    else:
        raise CheckpointError(f"{path}: unknown model kind {meta['kind']!r}")
    expected = model.state_dict()
    if set(expected) != set(tensors):
        raise CheckpointError(f"{path}: tensor names do not match a {meta['kind']} model")
    for name, ref in expected.items():
        if tuple(ref.shape) != tensors[name].shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, model expects {tuple(ref.shape)}"
            )
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    model.eval()
    return model, meta
