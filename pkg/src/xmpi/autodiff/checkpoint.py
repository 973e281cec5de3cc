"""Binary weight container.

Layout (little-endian)::

    b"XMPICKPT"  magic
    u32          format version (1)
    u32 + bytes  architecture, UTF-8 JSON
    u32          number of tensors
    per tensor:  u16 name length, name (UTF-8), u8 ndim, u64 * ndim shape,
                 float64 values in C order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"XMPICKPT"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], arch: dict) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta = json.dumps(arch, sort_keys=True).encode()
    chunks += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        chunks += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
        chunks += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    _atomic_write(path, b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {pos} (needed {n} more bytes)")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointFormatError("bad magic at byte 0")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} at byte 8")
    (n,) = struct.unpack("<I", take(4))
    arch = json.loads(take(n).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes after byte {pos}")
    return tensors, arch


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
