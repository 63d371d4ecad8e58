"""Parameter checkpoints: one binary file of length-prefixed named tensors.

Layout: magic 'OBJC', version u8, tensor count u32, then per tensor a
u16-length UTF-8 name, u8 ndim, u32 dims, and float32 little-endian data.
Tensors are written in sorted name order so identical parameter sets produce
identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"OBJC"
VERSION = 1


def save_checkpoint(path, params: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<BI", VERSION, len(params))
    for name in sorted(params):
        tensor = np.ascontiguousarray(params[name], dtype="<f4")
        data = name.encode("utf-8")
        blob += struct.pack("<H", len(data)) + data
        blob += struct.pack("<B", tensor.ndim)
        blob += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        blob += tensor.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<BI")
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if off + 4 * size > len(blob):
            raise FormatError(f"{path}: truncated tensor {name!r}")
        flat = np.frombuffer(blob, dtype="<f4", count=size, offset=off)
        off += 4 * size
        params[name] = flat.reshape(shape).astype(np.float64)
    return params
