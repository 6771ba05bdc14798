"""Checkpoint container: JSON manifest + raw little-endian array payload.

Layout (all integers little-endian):
    bytes 0:4    magic b"MSCK"
    bytes 4:8    format version (uint32, currently 1)
    bytes 8:12   manifest length in bytes (uint32)
    manifest     UTF-8 JSON: {"arrays": [{name, shape, dtype, offset}...],
                              "meta": <caller dict>}
    payload      arrays concatenated in manifest order

Arrays are written in the iteration order of the input mapping, so saving a
loaded checkpoint reproduces the file byte-for-byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MSCK"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays, meta=None):
    """arrays: ordered {name: np.ndarray(float32|float64)}; meta: JSON-able dict."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for array {name!r}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (arrays: {name: ndarray}, meta: dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    mlen = struct.unpack("<I", raw[8:12])[0]
    manifest = json.loads(raw[12 : 12 + mlen].decode("utf-8"))
    base = 12 + mlen
    arrays = {}
    for ent in manifest["arrays"]:
        dt = np.dtype(_DTYPES[ent["dtype"]])
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = base + ent["offset"]
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=start).reshape(ent["shape"])
        arrays[ent["name"]] = arr.astype(ent["dtype"], copy=True)
    return arrays, manifest["meta"]
