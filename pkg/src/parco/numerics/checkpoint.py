"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PARCO1"
    u32 count
    count x { u32 name_len, name (utf-8), u32 rank, rank x u64 extent,
              prod(extents) x f64 payload }
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import DataError
from .tensor import ParamStore

MAGIC = b"PARCO1"


def dumps(store: ParamStore) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(store))]
    for name, p in store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", p.value.ndim))
        parts.append(struct.pack(f"<{p.value.ndim}Q", *p.value.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> ParamStore:
    if not blob.startswith(MAGIC):
        raise DataError("not a PARCO1 checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise DataError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = take("<I")
    store = ParamStore()
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(blob):
            raise DataError("truncated checkpoint")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        if pos + 8 * size > len(blob):
            raise DataError(f"truncated payload for {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        store.add(name, arr.astype(np.float64))
    if pos != len(blob):
        raise DataError("trailing bytes after checkpoint payload")
    return store


def save(store: ParamStore, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps(store))


def load(path: Union[str, Path]) -> ParamStore:
    return loads(Path(path).read_bytes())
