"""Binary checkpoints for model weights.

Layout: magic ``FPCK``, u16 version, u32 header length, a UTF-8 JSON
header (model config, tensor manifest, epoch, rng states, free-form
metadata), the tensors as little-endian float64 in manifest order, and a
CRC-32 of everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"FPCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    weights: ModelWeights
    model_config: ModelConfig
    epoch: int = -1
    rng_states: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    manifest, chunks = [], []
    for kind, tensors in (("param", ckpt.weights.params), ("buffer", ckpt.weights.buffers)):
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            manifest.append({"name": name, "kind": kind, "shape": list(arr.shape),
                             "dtype": "<f8", "synced": ModelWeights.is_synced(name)})
            chunks.append(arr.astype("<f8").tobytes())
    header = json.dumps({
        "model_config": ckpt.model_config.to_dict(),
        "manifest": manifest,
        "epoch": int(ckpt.epoch),
        "rng_states": ckpt.rng_states,
        "meta": ckpt.meta,
    }, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)
    Path(path).write_bytes(body + _CRC.pack(zlib.crc32(body)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + _CRC.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body, (crc,) = raw[: -_CRC.size], _CRC.unpack(raw[-_CRC.size :])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(body[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    params, buffers = {}, {}
    offset = start
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: payload shorter than manifest")
        arr = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=offset).astype(np.float64)
        (params if entry["kind"] == "param" else buffers)[entry["name"]] = arr.reshape(shape)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} unexpected trailing bytes")
    return Checkpoint(
        ModelWeights(params, buffers),
        ModelConfig.from_dict(header["model_config"]),
        header.get("epoch", -1),
        header.get("rng_states", {}),
        header.get("meta", {}),
    )
