"""Versioned binary model container.

Layout: 8-byte magic, little-endian uint32 header length, canonical-JSON
header (kind, metadata, array manifest), then the raw little-endian array
blobs in manifest order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .types import PipelineError

MAGIC = b"GFCKPT01"


def save_checkpoint(path, kind: str, meta: dict,
                    arrays: list[tuple[str, np.ndarray]]) -> None:
    manifest = []
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
        blobs.append(le.tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": manifest},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise PipelineError(f"bad-checkpoint: {path} has wrong magic")
    (hlen,) = struct.unpack("<I", data[len(MAGIC): len(MAGIC) + 4])
    off = len(MAGIC) + 4
    if off + hlen > len(data):
        raise PipelineError(f"bad-checkpoint: {path} truncated header")
    try:
        header = json.loads(data[off: off + hlen].decode())
    except ValueError as exc:
        raise PipelineError(f"bad-checkpoint: {path} corrupt header") from exc
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        if off + nbytes > len(data):
            raise PipelineError(f"bad-checkpoint: {path} truncated arrays")
        arr = np.frombuffer(data[off: off + nbytes], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
        off += nbytes
    return header["kind"], header["meta"], arrays
