"""Versioned checkpoint files.

Layout::

    b"MIXSUP1\\n"
    uint64 little-endian header length
    UTF-8 JSON header {"config": ..., "iteration": int, "arrays": [...]}
    raw little-endian float64 array data, in header order

The byte stream is a pure function of the contents, so saving the same state
twice gives identical files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MIXSUP1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    iteration: int
    momentum: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for group, arrays in (("params", ckpt.params), ("momentum", ckpt.momentum)):
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            entries.append({"group": group, "name": name, "shape": list(arr.shape),
                            "offset": offset, "nbytes": arr.nbytes})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps({"config": ckpt.config, "iteration": int(ckpt.iteration),
                         "arrays": entries}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a MIXSUP1 checkpoint")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    base = pos + hlen
    groups: dict[str, dict] = {"params": {}, "momentum": {}}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {e['name']}")
        groups[e["group"]][e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).copy()
    return Checkpoint(header["config"], groups["params"], header["iteration"], groups["momentum"])
