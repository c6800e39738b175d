"""Binary checkpoint container.

Layout (little-endian)::

    b"MSNN" | u32 version | u32 manifest_len | manifest (UTF-8 JSON)
    u32 n_sections
    per section: u16 name_len | name | u8 ndim | ndim x u64 dims | u64 byte offset
    payload: f64 arrays, offsets relative to the payload start
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSNN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(sections: dict[str, np.ndarray], manifest: dict | None = None) -> bytes:
    man = json.dumps(manifest or {}, sort_keys=True).encode()
    head = [MAGIC, struct.pack("<II", VERSION, len(man)), man, struct.pack("<I", len(sections))]
    payload = []
    offset = 0
    for name, arr in sections.items():
        a = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        nb = name.encode()
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim)
                    + struct.pack(f"<{a.ndim}Q", *a.shape) + struct.pack("<Q", offset))
        payload.append(a.tobytes())
        offset += a.nbytes
    return b"".join(head + payload)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic at byte 0")
    version, man_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(take(man_len).decode())
    (count,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (off,) = struct.unpack("<Q", take(8))
        table.append((name, shape, off))
    base = pos
    sections = {}
    for name, shape, off in table:
        n = int(np.prod(shape)) if shape else 1
        start = base + off
        if start + 8 * n > len(data):
            raise CheckpointError(f"truncated section {name!r} at byte {start}")
        sections[name] = np.frombuffer(data, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(shape)
    return sections, manifest


def save(path, sections: dict[str, np.ndarray], manifest: dict | None = None) -> None:
    Path(path).write_bytes(encode(sections, manifest))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
