"""MFT: a small binary container for named float64 tensors.

Layout (all integers little-endian):
    magic "MFT1" (4 bytes)
    u32 tensor count
    per tensor:
        u32 name length, UTF-8 name bytes
        u32 rank
        rank x u64 dims
        row-major float64 payload (little-endian)

Round-trips are lossless for finite float64 payloads; names must be unique.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MFT1"


class MftError(ValueError):
    """Malformed MFT file or payload."""


def write_mft(path: str, tensors: dict[str, np.ndarray]) -> None:
    names = list(tensors.keys())
    if len(set(names)) != len(names):
        raise MftError("tensor names must be unique")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8").tobytes(order="C"))


def read_mft(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise MftError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    off = 4

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise MftError("truncated file")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if off + name_len > len(data):
            raise MftError("truncated name")
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        if name in tensors:
            raise MftError(f"duplicate tensor name {name!r}")
        (rank,) = take("<I")
        dims = [take("<Q")[0] for _ in range(rank)]
        n = int(np.prod(dims)) if dims else 1
        payload = n * 8
        if off + payload > len(data):
            raise MftError(f"truncated payload for {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(dims)
        off += payload
        tensors[name] = arr.astype(np.float64).copy()
    if off != len(data):
        raise MftError(f"{len(data) - off} trailing bytes")
    return tensors
