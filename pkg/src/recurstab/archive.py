"""RVPT tensor archive: the on-disk format for checkpoints and cached sequences.

Layout (all integers little-endian):

    magic   4 bytes  b"RVPT"
    version u32      1
    count   u32      number of tensors
    per tensor:
        name_len u16, name UTF-8,
        rank u8, dims u32[rank],
        payload float32[prod(dims)] little-endian, row-major

Order of tensors is preserved; round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RVPT"
VERSION = 1


class ArchiveError(ValueError):
    pass


def save_rvpt(path, tensors):
    """Write named arrays to ``path``. ``tensors`` is a dict or (name, array) pairs."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ArchiveError(f"tensor name too long: {len(raw)} bytes")
            if arr.ndim > 255:
                raise ArchiveError(f"tensor rank {arr.ndim} exceeds format limit")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_rvpt(path):
    """Read an RVPT archive into an ordered {name: float32 array} dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ArchiveError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported version {version}")
    out = {}
    off = 12
    for idx in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        end = off + 4 * n
        if end > len(blob):
            raise ArchiveError(f"{path}: truncated payload for tensor {idx} ({name!r})")
        arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims).copy()
        off = end
        out[name] = arr
    if off != len(blob):
        raise ArchiveError(f"{path}: {len(blob) - off} trailing bytes after last tensor")
    return out
