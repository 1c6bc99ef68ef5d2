"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"QTTTCKPT"
    offset 8   u32       format version (1)
    offset 12  u32       header length H in bytes
    offset 16  H bytes   UTF-8 JSON header, keys sorted, separators (",", ":")
                         {"config": {...}, "metadata": {...},
                          "tensors": [{"name", "shape", "partition"}, ...]}
    then       float64   tensor data, little-endian, row-major, concatenated
                         in header order

Writing a loaded checkpoint reproduces the original file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .transformer import ModelParams, param_names, partition_of

MAGIC = b"QTTTCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


def _header(params: ModelParams) -> bytes:
    header = {
        "config": params.config.to_dict(),
        "metadata": params.metadata,
        "tensors": [
            {"name": n, "shape": list(t.shape), "partition": partition_of(n)}
            for n, t in params.tensors.items()
        ],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(params: ModelParams) -> bytes:
    header = _header(params)
    parts = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    for t in params.tensors.values():
        parts.append(np.ascontiguousarray(t.detach().numpy(), dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> ModelParams:
    if len(data) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    config = ModelConfig.from_dict(header["config"])
    names = [entry["name"] for entry in header["tensors"]]
    if names != param_names(config):
        raise CheckpointError("tensor list does not match the stored config")
    offset = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"truncated data for {entry['name']}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float64, copy=True))
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after tensor data")
    return ModelParams(config, tensors, header["metadata"])


def save(params: ModelParams, path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> ModelParams:
    return loads(Path(path).read_bytes())
