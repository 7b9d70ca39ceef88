"""Versioned named-tensor checkpoint container.

Layout: magic, format version, a canonical-JSON index (name/dtype/shape/
offset/sha256 per section, plus a metadata dict), then raw little-endian
tensor payloads in index order. Sections are sorted by name and JSON keys are
sorted, so identical state always serializes to identical bytes; every section
carries a checksum so corruption is reported by name.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"GCLCKPT\x01"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (np.float32, torch.float32),
    "float64": (np.float64, torch.float64),
    "int64": (np.int64, torch.int64),
    "int32": (np.int32, torch.int32),
    "uint8": (np.uint8, torch.uint8),
    "bool": (np.bool_, torch.bool),
}
_TORCH_NAMES = {t: name for name, (_, t) in _DTYPES.items()}


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    arr = tensor.detach().cpu().contiguous()
    if arr.dtype not in _TORCH_NAMES:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return arr.numpy().tobytes()


def save_checkpoint(path: str, tensors: dict[str, torch.Tensor], meta: dict):
    """Write atomically; identical inputs produce byte-identical files."""
    sections = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        tensor = tensors[name]
        data = _tensor_bytes(tensor)
        sections.append({
            "name": name,
            "dtype": _TORCH_NAMES[tensor.dtype],
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
        })
        payloads.append(data)
        offset += len(data)
    index = json.dumps({"meta": meta, "sections": sections},
                       sort_keys=True, separators=(",", ":")).encode()
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<Q", len(index)))
            f.write(index)
            for data in payloads:
                f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str):
    """Read and verify; returns (tensors, meta)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version = struct.unpack("<I", raw[pos:pos + 4])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    pos += 4
    index_len = struct.unpack("<Q", raw[pos:pos + 8])[0]
    pos += 8
    try:
        index = json.loads(raw[pos:pos + index_len])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt index: {e}") from e
    payload_start = pos + index_len
    tensors: dict[str, torch.Tensor] = {}
    for sec in index["sections"]:
        start = payload_start + sec["offset"]
        data = raw[start:start + sec["nbytes"]]
        if len(data) != sec["nbytes"]:
            raise CheckpointError(
                f"{path}: section {sec['name']!r} truncated "
                f"({len(data)} of {sec['nbytes']} bytes)")
        digest = hashlib.sha256(data).hexdigest()
        if digest != sec["sha256"]:
            raise CheckpointError(
                f"{path}: checksum failure in section {sec['name']!r}")
        np_dtype, torch_dtype = _DTYPES[sec["dtype"]]
        arr = np.frombuffer(data, dtype=np_dtype).reshape(sec["shape"]).copy()
        tensors[sec["name"]] = torch.from_numpy(arr).to(torch_dtype)
    return tensors, index["meta"]
