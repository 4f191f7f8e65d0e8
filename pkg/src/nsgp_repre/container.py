"""Versioned binary container shared by prototype stores, accumulators,
projections, checkpoints and datasets.

Layout::

    magic    8 bytes   b"NSGPREP\\x00"
    version  uint32 LE
    hlen     uint32 LE  length of the JSON header in bytes
    header   hlen bytes UTF-8 JSON {"kind", "meta", "arrays": [{name, dtype, shape, offset, nbytes}]}
    payload  concatenated little-endian arrays, offsets relative to payload start

Float arrays are stored as ``<f8`` and integer arrays as ``<i8`` so a
write/read cycle is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"NSGPREP\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class ContainerError(ValueError):
    """Malformed or incompatible container file."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


def _normalize(arr: np.ndarray) -> tuple[str, np.ndarray]:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return "f8", np.ascontiguousarray(arr, dtype="<f8")
    if arr.dtype.kind in "iub":
        return "i8", np.ascontiguousarray(arr, dtype="<i8")
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode(kind: str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    descriptors = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        code, data = _normalize(arr)
        raw = data.tobytes(order="C")
        descriptors.append(
            {"name": name, "dtype": code, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": dict(meta), "arrays": descriptors}, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes, expect_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise ContainerError("truncated prefix", offset=len(blob))
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContainerError("bad magic", offset=0)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}", offset=8)
    hstart = _PREFIX.size
    if len(blob) < hstart + hlen:
        raise ContainerError("truncated header", offset=len(blob))
    try:
        header = json.loads(blob[hstart : hstart + hlen].decode())
        kind = header["kind"]
        meta = header["meta"]
        descriptors = header["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ContainerError(f"corrupt header: {exc}", offset=hstart) from None
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"expected kind {expect_kind!r}, found {kind!r}", offset=hstart)
    pstart = hstart + hlen
    arrays = {}
    for d in descriptors:
        start = pstart + d["offset"]
        end = start + d["nbytes"]
        if end > len(blob):
            raise ContainerError(f"array {d['name']!r} truncated", offset=len(blob))
        dtype = np.dtype(_DTYPES[d["dtype"]])
        count = int(np.prod(d["shape"], dtype=np.int64))
        if count * dtype.itemsize != d["nbytes"]:
            raise ContainerError(f"array {d['name']!r} size mismatch", offset=start)
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(d["shape"])
        arrays[d["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    if pstart + sum(d["nbytes"] for d in descriptors) != len(blob):
        raise ContainerError("trailing bytes after payload", offset=len(blob))
    return kind, meta, arrays


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write(path, kind: str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(kind, meta, arrays))


def read(path, expect_kind: str | None = None):
    return decode(Path(path).read_bytes(), expect_kind=expect_kind)
