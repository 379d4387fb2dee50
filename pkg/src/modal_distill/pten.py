"""PTEN v1: a bit-exact container for named float32 tensors.

Layout (all integers little-endian)::

    b"PTEN"                 4 bytes magic
    version                 u32 (= 1)
    manifest_len            u64
    manifest                UTF-8 JSON, canonical (sorted keys, no spaces)
    zero padding            to the next multiple of 8 from file start
    blob                    float32 LE data; each tensor starts 8-byte aligned
    digest                  u64 FNV-1a over the blob bytes

The manifest holds ``{"meta": {...}, "tensors": [{"name", "shape", "offset",
"count"}]}``; offsets are relative to the blob start. Tensors appear in sorted
name order so that equal inputs always produce identical files.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .rng import fnv1a64

MAGIC = b"PTEN"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class PtenError(Exception):
    """Base class for container errors."""


class PtenFormatError(PtenError):
    """Not a PTEN file or a malformed manifest."""


class PtenVersionError(PtenError):
    pass


class PtenTruncatedError(PtenError):
    pass


class PtenDigestError(PtenError):
    pass


def _align8(n: int) -> int:
    return (n + 7) & ~7


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        padded = _align8(len(raw))
        chunks.append(raw + b"\0" * (padded - len(raw)))
        offset += padded
    blob = b"".join(chunks)
    manifest = canonical_json({"meta": dict(meta or {}), "tensors": entries}).encode("utf-8")
    head = _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest
    head += b"\0" * (_align8(len(head)) - len(head))
    return head + blob + struct.pack("<Q", fnv1a64(blob))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(buf) < _HEADER.size:
        raise PtenTruncatedError(f"file is {len(buf)} bytes, shorter than the {_HEADER.size}-byte header")
    magic, version, mlen = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise PtenFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise PtenVersionError(f"unsupported PTEN version {version} (expected {VERSION})")
    mend = _HEADER.size + mlen
    if len(buf) < mend:
        raise PtenTruncatedError("manifest extends past end of file")
    try:
        manifest = json.loads(buf[_HEADER.size : mend].decode("utf-8"))
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise PtenFormatError(f"unreadable manifest: {exc}") from exc
    start = _align8(mend)
    blob_len = sum(_align8(4 * int(e["count"])) for e in entries)
    if len(buf) < start + blob_len + 8:
        raise PtenTruncatedError(f"expected {start + blob_len + 8} bytes, file has {len(buf)}")
    blob = buf[start : start + blob_len]
    (digest,) = struct.unpack_from("<Q", buf, start + blob_len)
    if fnv1a64(blob) != digest:
        raise PtenDigestError("blob digest mismatch: file is corrupt")
    out: dict[str, np.ndarray] = {}
    for e in entries:
        off, count = int(e["offset"]), int(e["count"])
        if off % 8 or off + 4 * count > blob_len:
            raise PtenFormatError(f"tensor {e['name']!r} has an invalid offset")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float64)
        out[e["name"]] = arr.reshape(e["shape"])
    return out, manifest.get("meta", {})


def save_pten(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode(tensors, meta))
    return path


def load_pten(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return ``(tensors, meta)``; tensors come back as float64 arrays."""
    return decode(Path(path).read_bytes())
