"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    b"PFTN" | u32 version | u32 count
    per tensor: u16 name_len | name (utf-8) | u8 rank | u32 extent * rank
                | u8 dtype (0=f32, 1=f64) | raw little-endian data
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"PFTN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise CheckpointError(f"rank {arr.ndim} exceeds container limit")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", code))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a PFTN container (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off:off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", view, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", view, off)
            off += 4 * rank
            (code,) = struct.unpack_from("<B", view, off)
            off += 1
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for {name!r}")
            dt = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64))
            nbytes = n * dt.itemsize
            if off + nbytes > len(view):
                raise CheckpointError(f"truncated data for {name!r}")
            arr = np.frombuffer(view[off:off + nbytes], dtype=dt).reshape(shape)
            off += nbytes
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    except struct.error as exc:
        raise CheckpointError(f"truncated container: {exc}") from None
    return out


def save_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
