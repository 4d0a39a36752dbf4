"""Flat binary parameter files with a JSON header.

Layout: one line of UTF-8 JSON terminated by ``\\n``, followed by the raw
little-endian float64 data of every tensor back to back. The header carries
free-form ``meta`` (dimensions, layer list, seed, ...) and a tensor table with
name, shape and byte offset relative to the start of the data block.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "funnel-asr-params/1"
DTYPE = np.dtype("<f8")


def save_params(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    table = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype=DTYPE, order="C")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"format": MAGIC, "meta": meta or {}, "tensors": table}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            f.write(b)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    data = raw[nl + 1 :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * DTYPE.itemsize
        if end > len(data):
            raise ValueError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data[start:end], dtype=DTYPE).reshape(shape).copy()
    return tensors, header["meta"]
