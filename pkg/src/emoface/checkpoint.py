"""Deterministic checkpoint container: JSON metadata plus a float32 blob.

Layout: ``u32 little-endian JSON length | UTF-8 JSON | float32 LE tensor
data``. Tensors are stored in the order listed in the JSON, which follows the
module's parameter registration order, so saving the same state twice yields
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DecodeError

SCHEMA_VERSION = 1


def save_checkpoint(path: str | Path, kind: str, meta: dict, state_dict: dict) -> None:
    """Write module state. ``meta`` must be JSON-serializable."""
    names, blobs = [], []
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        names.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": names,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> tuple[str, dict, dict]:
    """Read a checkpoint; returns ``(kind, meta, state_dict of torch tensors)``."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise DecodeError("checkpoint shorter than its length prefix", len(blob))
    (header_len,) = struct.unpack_from("<I", blob, 0)
    if len(blob) < 4 + header_len:
        raise DecodeError("declared header length runs past end of file", 4)
    try:
        header = json.loads(blob[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"checkpoint header is not valid JSON: {exc}", 4) from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DecodeError(f"unsupported checkpoint schema {header.get('schema_version')}", 4)
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise DecodeError(f"expected a {expect_kind} checkpoint, found {kind!r}", 4)
    state = {}
    offset = 4 + header_len
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise DecodeError(f"tensor {entry['name']!r} runs past end of file", offset)
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr)
        offset += nbytes
    if offset != len(blob):
        raise DecodeError(f"{len(blob) - offset} trailing bytes after last tensor", offset)
    return kind, header.get("meta", {}), state


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_digest(state_dict: dict) -> str:
    """Order-sensitive digest of a module state, for trained/frozen assertions."""
    h = hashlib.sha256()
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
