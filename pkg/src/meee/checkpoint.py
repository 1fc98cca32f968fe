"""Flat binary checkpoints.

Layout (little-endian)::

    8 bytes   magic  b"MEEECKPT"
    uint32    format version (1)
    uint32    header length H in bytes
    H bytes   UTF-8 JSON header; always holds "kind" and "n_values"
    8*n       float64 parameter values, concatenated in the order the
              header's "nets" list describes each network's
              [W0, b0, W1, b1, ...] (row-major)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MEEECKPT"
VERSION = 1


def write_flat(path: str | Path, header: dict, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8").ravel()
    header = dict(header, n_values=int(values.size))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        f.write(values.tobytes())


def read_flat(path: str | Path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    values = np.frombuffer(data[16 + hlen :], dtype="<f8").astype(np.float64)
    if values.size != header["n_values"]:
        raise ValueError(f"{path}: expected {header['n_values']} values, found {values.size}")
    return header, values
