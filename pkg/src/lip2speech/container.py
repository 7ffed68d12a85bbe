"""Single-file tensor container used for checkpoints, mels and features.

Layout::

    8 bytes   magic b"L2STNSR1"
    8 bytes   header length H (uint64, little-endian)
    H bytes   UTF-8 JSON header {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
    payload   raw little-endian arrays, each starting on an 8-byte boundary

Offsets are relative to the start of the payload. The header is written with
sorted keys so identical contents produce identical bytes.
"""
import json
from pathlib import Path

import numpy as np

MAGIC = b"L2STNSR1"
_ALLOWED = {"<f4", "<f8", "<i8", "|u1"}


class ContainerError(ValueError):
    pass


def _canon(arr):
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return np.array(arr, order="C")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype("<i8")
    elif arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    return np.array(arr, dtype=arr.dtype.newbyteorder("<"), order="C")


def write_container(path, tensors, meta=None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = _canon(tensors[name])
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        pad = (-len(raw)) % 8
        blobs.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    header += b" " * ((-len(header)) % 8)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(header)).astype("<u8").tobytes())
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return path


def read_container(path):
    """Return ``(tensors, meta)``; tensors come back in name order."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContainerError(f"{path}: not a tensor container")
    hlen = int(np.frombuffer(data[8:16], dtype="<u8")[0])
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        if e["dtype"] not in _ALLOWED:
            raise ContainerError(f"{path}: unsupported dtype {e['dtype']}")
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return tensors, header["meta"]
