"""Versioned binary container: JSON header plus little-endian float64 payload.

Layout::

    b"PODTAS\\0\\0" | u32 version | u32 header length | header (UTF-8 JSON) | arrays

The header lists every array's name and shape in payload order. Output is a
pure function of its inputs, so identical models produce identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PODTAS\0\0"
VERSION = 1


def write_container(path, kind: str, header: dict, arrays: dict) -> Path:
    specs = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    meta = json.dumps({"kind": kind, "header": header, "arrays": specs},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta)))
        fh.write(meta)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def read_container(path, kind: str):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a podtas container")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    meta = json.loads(data[16:16 + hlen].decode("utf-8"))
    if meta["kind"] != kind:
        raise ValueError(f"{path}: expected a {kind!r} container, found {meta['kind']!r}")
    offset = 16 + hlen
    arrays = {}
    for spec in meta["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[spec["name"]] = arr.astype(float)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after payload")
    return meta["header"], arrays
