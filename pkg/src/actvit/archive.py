"""Binary tensor container shared by dataset shards and model files.

Layout (all integers little-endian)::

    8 bytes   magic, e.g. b"ACTSHRD1" or b"ACTMODL1"
    u64       byte length of the JSON header
    ...       UTF-8 JSON header; ``header["tensors"]`` lists records
    ...       raw tensor bytes; record ``offset`` is relative to this point
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .exceptions import ArchiveError

FORMAT_VERSION = 1
SHARD_MAGIC = b"ACTSHRD1"
MODEL_MAGIC = b"ACTMODL1"

_DTYPES = {"f16": np.dtype("<f2"), "f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def dtype_code(dtype) -> str:
    dtype = np.dtype(dtype)
    for code, dt in _DTYPES.items():
        if dt == dtype.newbyteorder("<"):
            return code
    raise ArchiveError(f"unsupported dtype {dtype}")


def write_archive(path, magic: bytes, header: dict[str, Any], records: Iterable[tuple[dict, np.ndarray]]) -> None:
    """Write ``records`` (metadata, array) under ``header`` to ``path`` atomically."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    metas, blobs, offset = [], [], 0
    for meta, arr in records:
        code = meta.get("dtype") or dtype_code(arr.dtype)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        metas.append({**meta, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps({**header, "format_version": FORMAT_VERSION, "tensors": metas}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_archive(path, magic: bytes) -> tuple[dict[str, Any], list[tuple[dict, np.ndarray]]]:
    """Inverse of :func:`write_archive`; arrays come back in their stored dtype."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ArchiveError(f"{path}: truncated archive")
    if raw[:8] != magic:
        raise ArchiveError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    (head_len,) = struct.unpack("<Q", raw[8:16])
    start = 16 + head_len
    if start > len(raw):
        raise ArchiveError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    records = []
    for meta in header.pop("tensors"):
        if meta["dtype"] not in _DTYPES:
            raise ArchiveError(f"{path}: unknown dtype {meta['dtype']!r}")
        lo = start + meta["offset"]
        hi = lo + meta["nbytes"]
        if hi > len(raw):
            raise ArchiveError(f"{path}: truncated tensor {meta.get('name')!r}")
        arr = np.frombuffer(raw[lo:hi], dtype=_DTYPES[meta["dtype"]]).reshape(meta["shape"]).copy()
        records.append((meta, arr))
    return header, records
