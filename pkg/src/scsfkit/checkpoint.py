"""Binary parameter checkpoints.

Layout (all little-endian)::

    b"SCSFKIT1"
    repeated until EOF:
        uint32 name length, name bytes (utf-8)
        uint32 rank, rank x uint64 extents
        float64 payload, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"SCSFKIT1"


class CheckpointError(ValueError):
    pass


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            if name in out:
                raise CheckpointError(f"duplicate entry {name!r}")
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return out


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_arrays(arrays))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())
