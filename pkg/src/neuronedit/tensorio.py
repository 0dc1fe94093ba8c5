"""Header-manifest tensor container.

Layout::

    b"NEDTENS1"                 8-byte magic
    <uint64 little-endian>      header length in bytes
    <header JSON, utf-8>        {"format": ..., "kind": ..., "meta": {...},
                                 "tensors": [{"name", "shape", "dtype",
                                              "offset", "nbytes"}, ...]}
    <payload>                   flat little-endian tensors, offsets relative
                                to the start of the payload

Used for checkpoints (float32) and attribution matrices (float64).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import DataError

MAGIC = b"NEDTENS1"
FORMAT_TAG = "neuronedit-tensors/1"
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class TensorFormatError(DataError, ValueError):
    def __init__(self, message: str):
        super().__init__(message, stage="load")


def dumps(kind: str, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
            raise TensorFormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        dt = "<f4" if arr.dtype.itemsize == 4 else "<f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": FORMAT_TAG, "kind": kind, "meta": dict(meta or {}), "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def loads(blob: bytes, kind: str | None = None) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise TensorFormatError("bad magic; not a neuronedit tensor file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT_TAG:
        raise TensorFormatError(f"unsupported format tag {header.get('format')!r}")
    if kind is not None and header.get("kind") != kind:
        raise TensorFormatError(f"expected kind {kind!r}, found {header.get('kind')!r}")
    payload = memoryview(blob)[16 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise TensorFormatError(f"unsupported dtype {e['dtype']!r}")
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise TensorFormatError(f"truncated payload for tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return header, tensors


def save(path: str | Path, kind: str, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(kind, tensors, meta))


def load(path: str | Path, kind: str | None = None) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), kind)
