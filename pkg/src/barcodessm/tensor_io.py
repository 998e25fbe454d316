"""Flat binary container for named tensors.

Layout: 8 magic bytes, little-endian uint64 header length, UTF-8 JSON header,
raw little-endian payload. The header is a list of {name, dtype, shape,
offset, nbytes} entries with offsets relative to the payload start. Round
trips are bit-exact: payload bytes are the arrays' own little-endian bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"TBIN0001"

_DTYPES = {"f4": "<f4", "f8": "<f8"}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise ValueError(f"unsupported dtype {arr.dtype}")


def pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": _dtype_tag(arr), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(entries).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def unpack_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise ValueError("not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    entries = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    payload = blob[16 + hlen :]
    out: dict[str, np.ndarray] = {}
    for e in entries:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=False)
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(pack_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return unpack_tensors(f.read())
