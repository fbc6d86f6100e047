"""Flat binary checkpoint container.

Byte layout (all integers little-endian):

    magic   8 bytes   b"CFGADCK1" (version folded into the magic)
    meta    uint32 length + UTF-8 JSON blob (scalars: config hash, seed, ...)
    count   uint32 number of records
    record  uint16 name length, UTF-8 name,
            uint8 ndim, ndim * uint32 dims,
            prod(dims) float64 values (little-endian, row-major)

Records hold named float64 arrays only; anything scalar lives in the meta
blob.
"""

import json
import struct

import numpy as np

MAGIC = b"CFGADCK1"


def save_checkpoint(path, arrays, meta=None):
    """Write named float64 arrays plus a JSON meta blob."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            if not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def _read(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    """Read back (arrays, meta) from save_checkpoint output."""
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC), "magic") != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic)")
        meta_len = struct.unpack("<I", _read(fh, 4, "meta length"))[0]
        meta = json.loads(_read(fh, meta_len, "meta blob").decode("utf-8"))
        count = struct.unpack("<I", _read(fh, 4, "record count"))[0]
        arrays = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read(fh, 2, "name length"))[0]
            name = _read(fh, name_len, "name").decode("utf-8")
            ndim = struct.unpack("<B", _read(fh, 1, "ndim"))[0]
            dims = [struct.unpack("<I", _read(fh, 4, "dim"))[0] for _ in range(ndim)]
            n_vals = int(np.prod(dims)) if dims else 1
            raw = _read(fh, 8 * n_vals, f"data for {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
        return arrays, meta
