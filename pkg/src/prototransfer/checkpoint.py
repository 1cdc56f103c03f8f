"""PTT1 parameter checkpoint format.

Layout: magic bytes ``PTT1``, u32 little-endian tensor count, then per
tensor: u32 name length, UTF-8 name, u32 rank, u32 dims[rank], f32
little-endian data in row-major order. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"PTT1"


def save_ptt1(path, tensors: dict[str, np.ndarray]):
    """Write named float32 arrays; non-f32 inputs are cast."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            # asarray (not ascontiguousarray) keeps rank-0 tensors rank 0;
            # tobytes() below emits C order regardless of memory layout
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_ptt1(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a PTT1 file (bad magic {blob[:4]!r})")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"{path}: truncated PTT1 file")
        chunk = blob[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
        out[name] = data
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after last tensor")
    return out
