"""VTF1 tensor files: ``b"VTF1"``, u32 rank, rank x u32 dims, f32 LE payload."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTF1"


class VTFError(ValueError):
    pass


def dumps(arr) -> bytes:
    a = np.asarray(arr, dtype="<f4", order="C")
    if not np.isfinite(a).all():
        raise VTFError("refusing to store non-finite values")
    header = MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return header + a.tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise VTFError("bad magic, not a VTF1 file")
    if len(buf) < 8:
        raise VTFError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, 4)
    end = 8 + 4 * rank
    if len(buf) < end:
        raise VTFError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != end + 4 * count:
        raise VTFError(f"payload holds {(len(buf) - end) // 4} values, header says {count}")
    return np.frombuffer(buf, dtype="<f4", offset=end).reshape(dims).astype(np.float32)


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
