"""Single-file binary checkpoints.

Layout (little endian)::

    magic        8 bytes   b"STUDACKP"
    version      uint32
    header_len   uint64
    payload_len  uint64
    digest       32 bytes  sha256(header + payload)
    header       JSON: {"metadata": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}
    payload      raw tensor bytes, concatenated in header order
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"STUDACKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQQ32s")


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


def save_checkpoint(path, tensors: dict[str, torch.Tensor], metadata: dict | None = None) -> str:
    """Write ``tensors`` plus JSON ``metadata`` atomically; returns the sha256 digest."""
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"metadata": metadata or {}, "tensors": entries}, sort_keys=True).encode()
    payload = b"".join(blobs)
    digest = hashlib.sha256(header + payload).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header), len(payload), digest))
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)
    return digest.hex()


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointCorruptError(f"{path}: truncated header")
    magic, version, hlen, plen, digest = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")
    body = data[_PREFIX.size:]
    if len(body) != hlen + plen:
        raise CheckpointCorruptError(f"{path}: expected {hlen + plen} body bytes, found {len(body)}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError(f"{path}: checksum mismatch")
    header = json.loads(body[:hlen])
    payload = body[hlen:]
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, header["metadata"]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_module(path, module: torch.nn.Module, metadata: dict | None = None) -> str:
    return save_checkpoint(path, module.state_dict(), metadata)


def load_into(module: torch.nn.Module, path) -> dict:
    tensors, meta = load_checkpoint(path)
    module.load_state_dict(tensors)
    return meta
