"""Small binary container: magic, a JSON header, then raw little-endian arrays."""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SLAB\x01"


def write_arrays(path: str | os.PathLike, header: dict, arrays: dict[str, np.ndarray]) -> None:
    layout = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        layout.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    meta = json.dumps({"header": header, "arrays": layout}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_arrays(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a sessionlab binary file")
        (n,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n))
        arrays = {}
        for spec in meta["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return meta["header"], arrays
