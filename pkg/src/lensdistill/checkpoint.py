"""Binary checkpoint format.

Layout: 8-byte magic ``DLENSCKP``, 4-byte little-endian header length N,
N bytes of UTF-8 JSON header (format version, model config, ordered tensor
manifest of name / dtype / shape / byte offset), then the contiguous
little-endian fp32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import FORMAT_VERSION, ModelCheckpoint, ModelConfig, param_shapes

MAGIC = b"DLENSCKP"
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _header(ckpt: ModelCheckpoint) -> dict:
    manifest, offset = [], 0
    for name, t in ckpt.params.items():
        manifest.append({"name": name, "dtype": "f32", "shape": list(t.shape), "offset": offset})
        offset += t.size * _F32.itemsize
    return {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "tensors": manifest,
    }


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    parts += [np.ascontiguousarray(t.data, dtype=_F32).tobytes() for t in ckpt.params.values()]
    return b"".join(parts)


def from_bytes(raw: bytes) -> ModelCheckpoint:
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CheckpointError("corrupt header: bad magic")
    (n,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + n:
        raise CheckpointError("corrupt header: truncated header")
    try:
        header = json.loads(raw[12:12 + n].decode("utf-8"))
        version = header["format_version"]
        cfg = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")

    expected = param_shapes(cfg)
    names = [m["name"] for m in manifest]
    if names != list(expected):
        raise CheckpointError("manifest error: tensor names do not match config")
    payload = raw[12 + n:]
    params, offset = {}, 0
    for m in manifest:
        shape = tuple(m["shape"])
        if shape != expected[m["name"]]:
            raise CheckpointError(
                f"manifest error: {m['name']} declared {shape}, config implies {expected[m['name']]}"
            )
        if m.get("dtype") != "f32" or m.get("offset") != offset:
            raise CheckpointError(f"manifest error: bad dtype/offset for {m['name']}")
        nbytes = int(np.prod(shape)) * _F32.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError("truncated payload")
        arr = np.frombuffer(payload, dtype=_F32, count=int(np.prod(shape)), offset=offset)
        params[m["name"]] = Tensor(arr.reshape(shape).astype(np.float64))
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("trailing bytes after payload")
    return ModelCheckpoint(cfg, params, version)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    return from_bytes(Path(path).read_bytes())
