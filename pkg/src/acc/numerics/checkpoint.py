"""Binary checkpoint container.

Layout: magic "ACCW", version u32 LE, entry count u32, then per entry:
name length u32, UTF-8 name, dtype tag u8 (0 = f32, 1 = f64), ndim u32,
each dim u64, raw little-endian values. Readers reject unknown versions.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"ACCW"
VERSION = 1
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    """Entries written in dict order; float32/float64 arrays only."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(entries))
    seen: set[str] = set()
    for name, arr in entries.items():
        if name in seen:
            raise CheckpointError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<BI", _TAGS[arr.dtype], arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<Q", dim)
        out += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    view = memoryview(buf)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        piece = view[off:off + n]
        off += n
        return piece

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic (not an ACCW container)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        tag, ndim = struct.unpack("<BI", take(5))
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag}")
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        n = 1
        for dim in shape:
            n *= dim
        dt = _DTYPES[tag]
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        if name in entries:
            raise CheckpointError(f"duplicate entry name {name!r}")
        entries[name] = arr.astype(arr.dtype.newbyteorder("="))
    if off != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return entries
