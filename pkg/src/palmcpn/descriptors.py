"""Binary descriptor files.

Layout (little-endian)::

    4 bytes   magic b"PDSC"
    uint32    count
    uint32    dim
    4 bytes   element tag b"f4le" (32-bit float)
    count*dim float32 values, row-major
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PDSC"
TAG = b"f4le"
_HEADER = struct.Struct("<4sII4s")


def write_descriptors(path, descriptors: np.ndarray) -> None:
    d = np.asarray(descriptors)
    if d.ndim != 2:
        raise ValueError(f"descriptors must be 2-D, got shape {d.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, d.shape[0], d.shape[1], TAG))
        fh.write(np.ascontiguousarray(d, dtype="<f4").tobytes())


def read_descriptors(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, count, dim, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a descriptor file")
    if tag != TAG:
        raise ValueError(f"{path}: unsupported element type {tag!r}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * count * dim:
        raise ValueError(f"{path}: expected {4 * count * dim} body bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)
