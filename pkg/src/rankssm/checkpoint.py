"""Flat binary checkpoint format.

Layout (all integers little-endian u32)::

    b"RKSM" | version | count | count x record
    record = name_len | name (utf-8) | rank | dims[rank] | float64 payload (LE)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"RKSM"
VERSION = 1


def save_checkpoint(path, state: dict) -> None:
    """Write ``name -> array`` pairs in insertion order; the file is replaced atomically."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not an RKSM checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    state = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).astype(np.float64)
            off += 8 * size
            state[name] = arr.reshape(dims)
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(buf):
        raise DataError(f"{path}: {len(buf) - off} trailing bytes")
    return state
