"""Self-describing binary container for problems and adapter checkpoints.

Layout::

    8 bytes   magic b"LORADYN1"
    4 bytes   header length L (uint32, little endian)
    L bytes   UTF-8 JSON header: {"kind": ..., "meta": {...},
              "blocks": [{"name": ..., "shape": [rows, cols]}, ...]}
    payload   each block in header order, row-major little-endian float64
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ArgumentError

MAGIC = b"LORADYN1"


def dumps(kind, meta, blocks):
    """Serialize ``blocks`` (an ordered mapping name -> 2-D array) to bytes."""
    header = {
        "kind": kind,
        "meta": meta,
        "blocks": [{"name": name, "shape": list(np.shape(arr))} for name, arr in blocks.items()],
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", len(raw)), raw]
    for arr in blocks.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data):
    """Inverse of :func:`dumps`; returns ``(kind, meta, blocks)``."""
    if data[:8] != MAGIC:
        raise ArgumentError("not a lora_dyn container")
    (length,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + length].decode())
    offset = 12 + length
    blocks = {}
    for spec in header["blocks"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        blocks[spec["name"]] = arr.reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ArgumentError("trailing bytes in container")
    return header["kind"], header["meta"], blocks


def save(path, kind, meta, blocks):
    with open(path, "wb") as fh:
        fh.write(dumps(kind, meta, blocks))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
