"""Named-tensor binary container shared by model and rotation archives.

Layout (all integers little-endian)::

    b"SPNQ1"
    u32 tensor count
    per tensor: u32 name length, UTF-8 name, u8 dtype, u8 ndim, ndim × u32 dims, raw data

dtype codes: 0 = f32, 1 = f64, 2 = u8. The reserved tensor ``__config`` is a
u8 tensor holding UTF-8 JSON.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPNQ1"
CONFIG_KEY = "__config"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


class ArchiveError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], config: dict | None = None, storage: str = "f64") -> bytes:
    """Serialize tensors (sorted by name) plus an optional JSON config."""
    items = {}
    for name, t in tensors.items():
        t = np.asarray(t)
        if t.dtype != np.uint8:
            t = t.astype(np.float32 if storage == "f32" else np.float64)
        items[name] = t
    if config is not None:
        items[CONFIG_KEY] = np.frombuffer(json.dumps(config, sort_keys=True).encode(), dtype=np.uint8)
    out = [MAGIC, struct.pack("<I", len(items))]
    for name in sorted(items):
        t = items[name]
        raw = name.encode("utf-8")
        code = _CODES[t.dtype]
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<BB", code, t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if data[:5] != MAGIC:
        raise ArchiveError("bad magic: not an SPNQ1 archive")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ArchiveError("truncated archive")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ArchiveError(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(np.float64) if code in (0, 1) else arr.copy()
    if pos != len(data):
        raise ArchiveError("trailing bytes after last tensor")
    config = None
    if CONFIG_KEY in tensors:
        config = json.loads(tensors.pop(CONFIG_KEY).tobytes().decode("utf-8"))
    return tensors, config


def write(path, tensors, config=None, storage="f64") -> None:
    Path(path).write_bytes(encode(tensors, config, storage))


def read(path) -> tuple[dict[str, np.ndarray], dict | None]:
    return decode(Path(path).read_bytes())
