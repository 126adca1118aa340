"""Flat named-array container used for model checkpoints and filter banks.

Layout (all integers little-endian)::

    magic     4 bytes   b"PCKP"
    version   uint32    1
    meta_len  uint32    length of the metadata block
    meta      bytes     UTF-8 JSON object (may be "{}")
    count     uint32    number of arrays
    count times:
        name_len  uint16
        name      UTF-8 bytes
        ndim      uint8
        shape     ndim x uint32
        dtype     4 bytes   b"f4le" (IEEE-754 binary32, little-endian)
        data      prod(shape) x 4 bytes, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

MAGIC = b"PCKP"
VERSION = 1
DTYPE_TAG = b"f4le"

PathLike = Union[str, Path]


class CheckpointError(ValueError):
    pass


def save_arrays(path: PathLike, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(DTYPE_TAG)
            fh.write(arr.tobytes(order="C"))


def load_arrays(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        if buf[pos:pos + 4] != DTYPE_TAG:
            raise CheckpointError(f"{path}: array {name!r} has unsupported element type")
        pos += 4
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return arrays, meta
