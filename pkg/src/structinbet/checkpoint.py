"""Binary tensor container used for checkpoints.

Layout (little-endian)::

    b"SINB" | u32 version=1 | u32 count
    repeated count times:
        u16 name_len | name (utf-8) | u8 rank | u32 dims[rank] | f32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SINB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"rank {arr.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic, not a SINB tensor file")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            numel = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=numel, offset=off).reshape(dims)
            off += 4 * numel
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated tensor file: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt tensor file: {exc}") from None
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after last tensor")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
