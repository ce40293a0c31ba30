"""Versioned binary container for named tensors plus JSON metadata.

Layout: 8-byte magic, uint64 little-endian header length, UTF-8 JSON header,
then the raw tensor payloads back to back. The header carries the container
kind, a format version, caller metadata, and an index of (name, dtype, shape,
offset) entries. Byte output is deterministic for identical inputs: sorted
JSON keys, no timestamps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDTENS1\n"
FORMAT_VERSION = 1

_SUPPORTED_DTYPES = {"float32", "float64", "int64", "int32", "uint8", "bool"}


class ContainerError(ValueError):
    """Raised when a container file is malformed or of the wrong kind."""


def write_tensors(path, tensors, meta=None, kind="tensors"):
    """Write ``tensors`` (dict of name -> ndarray) to ``path``.

    Arrays are stored little-endian and C-contiguous. ``meta`` must be
    JSON-serializable.
    """
    path = Path(path)
    index = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.name not in _SUPPORTED_DTYPES:
            raise ContainerError(f"unsupported dtype {arr.dtype.name!r} for tensor {name!r}")
        buf = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(buf),
            }
        )
        payloads.append(buf)
        offset += len(buf)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta if meta is not None else {},
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for buf in payloads:
            fh.write(buf)


def read_tensors(path, expect_kind=None):
    """Read a container written by :func:`write_tensors`.

    Returns ``(tensors, meta)``. Raises :class:`ContainerError` on a bad
    magic, an unsupported version, a kind mismatch, or truncation.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not a protodiv tensor container (bad magic)")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    header_start = len(MAGIC) + 8
    if header_start + header_len > len(raw):
        raise ContainerError(f"{path}: truncated header")
    header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(
            f"{path}: unsupported format version {header.get('format_version')!r}"
        )
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise ContainerError(
            f"{path}: container kind {header.get('kind')!r}, expected {expect_kind!r}"
        )
    payload_start = header_start + header_len
    tensors = {}
    for entry in header["tensors"]:
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise ContainerError(f"{path}: truncated payload for tensor {entry['name']!r}")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw[start:end], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.dtype(entry["dtype"]), copy=True)
    return tensors, header["meta"]
