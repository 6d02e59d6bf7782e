"""Tiny self-describing binary container used for every model/embedding file.

Layout::

    MAGIC (8 bytes) | uint64 header length | UTF-8 JSON header | raw arrays

The JSON header carries free-form metadata plus an ``arrays`` manifest of
``(name, dtype, shape, offset, nbytes)``. Arrays are stored C-contiguous
little-endian. No timestamps are written, so identical content gives
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XMRANK1\n"


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dtype, copy=False)
        raw = arr.tobytes(order="C")
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an xmrank binary file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos: pos + 8])
    pos += 8
    header = json.loads(data[pos: pos + hlen].decode("utf-8"))
    pos += hlen
    arrays = {}
    for entry in header["arrays"]:
        start = pos + entry["offset"]
        buf = data[start: start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return header["meta"], arrays
