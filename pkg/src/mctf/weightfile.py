"""Binary named-tensor container (``.mctf``).

Layout, all integers little-endian::

    b"MCTF"                       magic
    u32  version                  currently 1
    u32  tensor count
    per tensor:
        u32  name length in bytes
        ...  UTF-8 name
        u32  rank
        u64  dims[rank]
        f32  data, row-major, prod(dims) values
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MCTF"
VERSION = 1


class WeightFileError(ValueError):
    pass


def dumps(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(blob):
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise WeightFileError("bad magic: not an MCTF tensor file")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise WeightFileError("file ended unexpectedly")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    version, count = read("<II")
    if version != VERSION:
        raise WeightFileError(f"unsupported format version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = read("<I")
        if pos + name_len > len(view):
            raise WeightFileError("file ended unexpectedly")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = read("<I")
        dims = read(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * n
        if pos + nbytes > len(view):
            raise WeightFileError(f"tensor {name!r} truncated")
        data = np.frombuffer(view, dtype="<f4", count=n, offset=pos)
        pos += nbytes
        tensors[name] = data.astype(np.float32).reshape(dims)
    if pos != len(view):
        raise WeightFileError("trailing bytes after last tensor")
    return tensors


def save(path, tensors):
    Path(path).write_bytes(dumps(tensors))


def load(path):
    return loads(Path(path).read_bytes())
