"""FCKPT1 checkpoint container.

Layout (all integers little-endian)::

    b"FCKPT1"
    u8  section-tag length, tag (ascii)
    u32 metadata length, metadata (utf-8 ``key = value`` lines)
    u32 tensor count
    per tensor: u16 name length, name (utf-8), u8 ndim, u32 dims...,
                then prod(dims) f64 values in C order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FCKPT1"


class CheckpointError(ValueError):
    pass


def dumps(section, meta, tensors) -> bytes:
    tag = section.encode("ascii")
    text = "".join(f"{k} = {v}\n" for k, v in meta.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<B", len(tag)), tag,
             struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes):
    """Return ``(section, meta, tensors)``; tensors keep file order."""
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (tlen,) = struct.unpack("<B", take(1))
    section = take(tlen).decode("ascii")
    (mlen,) = struct.unpack("<I", take(4))
    meta = {}
    for line in take(mlen).decode("utf-8").splitlines():
        key, _, value = line.partition(" = ")
        meta[key] = value
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after tensor table")
    return section, meta, tensors


def save(path, section, meta, tensors):
    Path(path).write_bytes(dumps(section, meta, tensors))


def load(path, section=None):
    sec, meta, tensors = loads(Path(path).read_bytes())
    if section is not None and sec != section:
        raise CheckpointError(f"expected a {section!r} checkpoint, found {sec!r}")
    return sec, meta, tensors
