"""Checkpoint container: a JSON header describing named tensors followed by
little-endian float32 blobs in header order.

Layout: 8-byte magic ``VQSURF01``, uint64-LE header length, UTF-8 JSON
header, then the raw float32 data. The header carries an architecture
description plus, per tensor, its name, shape, and byte offset into the
blob section. Round-trips are value-exact at 32-bit precision.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"VQSURF01"


class CheckpointError(ValueError):
    """Raised for malformed or truncated checkpoint files."""


def save_checkpoint(path, arch: dict, tensors) -> None:
    """Write named arrays (any float dtype; stored as float32) to ``path``.

    ``tensors`` is an ordered iterable of (name, array) pairs; blob order
    follows it exactly.
    """
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors:
        arr32 = np.asarray(arr, dtype="<f4")  # keeps 0-d shapes intact
        entries.append(
            {"name": name, "shape": list(arr32.shape), "offset": offset}
        )
        blobs.append(arr32.tobytes())
        offset += arr32.nbytes
    header = {
        "format": "vqsurf-checkpoint",
        "version": 1,
        "arch": arch,
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (arch, OrderedDict name -> float64 array).

    Values are exactly the stored float32 values, widened for computation.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    blob_start = start + hlen
    out = OrderedDict()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = blob_start + entry["offset"]
        hi = lo + 4 * count
        if hi > len(data):
            raise CheckpointError(f"{path}: truncated blob for {entry['name']}")
        arr = np.frombuffer(data[lo:hi], dtype="<f4").reshape(shape)
        out[entry["name"]] = arr.astype(np.float64)
    return header["arch"], out
