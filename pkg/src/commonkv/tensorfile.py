"""Single-file tensor container: JSON header + raw little-endian f32 payload.

Byte layout (documented here and in the README):

    bytes 0..7    header length N as little-endian uint64
    bytes 8..8+N  UTF-8 JSON object:
                      {"meta": {...arbitrary JSON metadata...},
                       "tensors": {name: {"dtype": "f32",
                                          "shape": [d0, d1, ...],
                                          "offset": byte offset into payload}}}
    bytes 8+N..   payload: tensors in ascending name order, each stored
                  row-major (C order) little-endian float32, no padding

Writing is fully deterministic: JSON keys are sorted, payload order is the
sorted tensor-name order, and offsets are derived from shapes alone.  Two
calls with equal contents produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import NumericError

_MAGIC_DTYPE = "f32"


def _payload_layout(tensors: dict[str, np.ndarray]) -> dict[str, int]:
    offsets: dict[str, int] = {}
    cursor = 0
    for name in sorted(tensors):
        offsets[name] = cursor
        cursor += tensors[name].size * 4
    return offsets


def serialize(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize named tensors plus a metadata dict into container bytes."""
    arrays = {}
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"tensor {name!r} contains non-finite values")
        arrays[name] = a
    offsets = _payload_layout(arrays)
    header = {
        "meta": meta if meta is not None else {},
        "tensors": {
            name: {"dtype": _MAGIC_DTYPE, "shape": list(a.shape), "offset": offsets[name]}
            for name, a in arrays.items()
        },
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<Q", len(header_bytes)), header_bytes]
    for name in sorted(arrays):
        parts.append(arrays[name].astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def deserialize(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`serialize`. Returns (tensors, meta)."""
    if len(blob) < 8:
        raise ValueError("container too short for header length field")
    (header_len,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    payload = blob[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, desc in header["tensors"].items():
        if desc["dtype"] != _MAGIC_DTYPE:
            raise ValueError(f"unsupported dtype {desc['dtype']!r} for tensor {name!r}")
        shape = tuple(desc["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = desc["offset"]
        raw = payload[start : start + count * 4]
        if len(raw) != count * 4:
            raise ValueError(f"payload truncated for tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return tensors, header.get("meta", {})


def payload_nbytes(blob: bytes) -> int:
    """Byte count of the raw tensor payload (header excluded)."""
    (header_len,) = struct.unpack("<Q", blob[:8])
    return len(blob) - 8 - header_len


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(serialize(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return deserialize(Path(path).read_bytes())
