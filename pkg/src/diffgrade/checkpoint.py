"""Checkpoint container shared by the backbone and the grade head.

Layout (little-endian):
  magic "DGCKPT1\\n" | u32 header length | header JSON | payload | sha256(32B)

The header echoes the producing config and declares name/dtype/shape for each
tensor; the payload is the tensors' C-order bytes concatenated in header
order. The trailing digest covers everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"DGCKPT1\n"


class CheckpointError(ValueError):
    """Corrupt file, checksum failure, or config mismatch."""


def save_checkpoint(
    path: str | Path, kind: str, config: dict, tensors: dict[str, np.ndarray]
) -> str:
    """Write the container; returns the hex digest of the file contents."""
    entries = []
    payload = bytearray()
    for name, array in tensors.items():
        array = np.ascontiguousarray(array)
        entries.append({"name": name, "dtype": str(array.dtype), "shape": list(array.shape)})
        payload.extend(array.tobytes())
    header = json.dumps({"kind": kind, "config": config, "tensors": entries}, sort_keys=True).encode()
    body = _MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)
    digest = hashlib.sha256(body).digest()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(digest)
    return digest.hex()


def load_checkpoint(path: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify the container; returns (config, tensors)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(_MAGIC) + 4 + 32 or blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    (header_len,) = struct.unpack_from("<I", body, len(_MAGIC))
    header_start = len(_MAGIC) + 4
    header = json.loads(body[header_start : header_start + header_len].decode())
    if header.get("kind") != kind:
        raise CheckpointError(f"{path}: kind {header.get('kind')!r}, expected {kind!r}")

    tensors: dict[str, np.ndarray] = {}
    offset = header_start + header_len
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: payload shorter than header declares")
        tensors[entry["name"]] = np.frombuffer(
            body, dtype=dtype, count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing payload bytes")
    return header["config"], tensors


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
