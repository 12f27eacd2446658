"""RAPW tensor container.

Little-endian layout::

    b"RAPW"  u32 version=1  u32 count
    count x { u16 name_len, name (utf-8), u8 rank, rank x u32 extent, float32 data row-major }

Saving also writes ``<path>.manifest.json`` listing name, shape and a sha256
of each tensor's bytes so a file can be audited without this package.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RAPW"
VERSION = 1


class WeightFileError(ValueError):
    pass


def tensor_checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if not 1 <= arr.ndim <= 4:
            raise WeightFileError(f"tensor {name!r} has rank {arr.ndim}; RAPW stores rank 1-4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise WeightFileError("not a RAPW file (bad magic)")
    if len(buf) < 12:
        raise WeightFileError("truncated RAPW header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported RAPW version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape))
            if pos + 4 * n > len(buf):
                raise WeightFileError(f"tensor {name!r} is truncated")
            if name in out:
                raise WeightFileError(f"duplicate tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise WeightFileError(f"truncated RAPW file: {exc}") from None
    if pos != len(buf):
        raise WeightFileError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray], manifest: bool = True) -> None:
    path = Path(path)
    path.write_bytes(encode(tensors))
    if manifest:
        entries = [
            {"name": k, "shape": list(np.shape(v)), "sha256": tensor_checksum(np.asarray(v))}
            for k, v in tensors.items()
        ]
        Path(f"{path}.manifest.json").write_text(json.dumps({"tensors": entries}, indent=2) + "\n")


def load(path: str | Path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read {path}: {exc}") from None
    return decode(buf)
