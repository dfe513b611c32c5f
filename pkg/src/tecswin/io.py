"""Raw tensor files and checkpoints.

Raw tensor record::

    b"TSW1" | u32 rank | u32 dim * rank | float32 payload (little-endian, row-major)

Checkpoint::

    b"TSWC" | u32 manifest length | UTF-8 JSON manifest | concatenated raw tensor records

The manifest maps each tensor name to its ``offset`` (bytes from the start
of the record region) and ``shape``, plus a free-form ``meta`` object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

TENSOR_MAGIC = b"TSW1"
CHECKPOINT_MAGIC = b"TSWC"


class FormatError(ValueError):
    pass


def encode_tensor(array: np.ndarray) -> bytes:
    a = np.array(array, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
    header = TENSOR_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns the array and the end offset."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    end = start + 4 * n
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=start).astype(np.float32)
    return data.reshape(dims), end


def save_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor record")
    return arr


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    records = []
    entries = []
    offset = 0
    for name in sorted(tensors):
        rec = encode_tensor(tensors[name])
        entries.append({"name": name, "offset": offset, "shape": list(np.shape(tensors[name]))})
        records.append(rec)
        offset += len(rec)
    manifest = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(manifest)) + manifest)
        for rec in records:
            fh.write(rec)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (mlen,) = struct.unpack_from("<I", buf, 4)
    manifest = json.loads(buf[8 : 8 + mlen].decode("utf-8"))
    base = 8 + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        arr, _ = decode_tensor(buf, base + entry["offset"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"shape mismatch for {entry['name']}")
        tensors[entry["name"]] = arr
    return tensors, manifest.get("meta", {})
