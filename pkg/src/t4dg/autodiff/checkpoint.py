"""Binary tensor container shared by checkpoints, grids and depth maps.

Layout (little-endian): magic ``T4DG``, u32 version, u32 entry count, then per
entry u32 name length, UTF-8 name, u32 rank, u32 extents, float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"T4DG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(entries: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    off = 12
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        if name in entries:
            raise CheckpointError(f"duplicate entry {name!r}")
        entries[name] = arr.astype(np.float32)
    if off != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return entries


def save(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
