"""Flat binary container for named float64 tensors (``.tkro`` files)."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

MAGIC = b"TKRO1"

PathLike = Union[str, Path]


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, tensor in tensors.items():
        arr = np.asarray(tensor, dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def loads(blob: bytes) -> Dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise ValueError("not a TKRO1 container (bad magic)")
    out: Dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    end = len(blob)

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > end:
            raise ValueError("truncated TKRO1 container")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    while pos < end:
        (name_len,) = read("<I")
        if pos + name_len > end:
            raise ValueError("truncated TKRO1 container")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = read("<I")
        dims = read(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        nbytes = 8 * count
        if pos + nbytes > end:
            raise ValueError("truncated TKRO1 container")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        pos += nbytes
        if name in out:
            raise ValueError(f"duplicate entry {name!r}")
        out[name] = arr.reshape(dims).astype(np.float64)
    return out


def save_tensors(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
