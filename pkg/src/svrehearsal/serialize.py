"""Flat little-endian binary container for arrays plus a JSON metadata block.

Layout: magic, version, u32-length-prefixed UTF-8 JSON metadata, u32 array
count, then per array a u16-length-prefixed name, a dtype code, a u8 ndim,
u32 dims, and the raw little-endian bytes. Float32 payloads round-trip
bit-exactly; checkpoints use the float64 code.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import InvalidInput

MAGIC = b"SVRB"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<i4", 2: "<f8", 3: "<i8"}
_CODES = {np.dtype("<f4"): 0, np.dtype("<i4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}


def write_container(path, arrays: dict, meta: dict | None = None):
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            code = _CODES.get(arr.dtype.newbyteorder("<"))
            if code is None:
                raise InvalidInput(f"unsupported dtype {arr.dtype} for array {name!r}")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", code))
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def read_container(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise InvalidInput(f"{path}: not a container file")
        (version,) = struct.unpack("<H", f.read(2))
        if version != VERSION:
            raise InvalidInput(f"{path}: unsupported container version {version}")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (code,) = struct.unpack("<B", f.read(1))
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            dtype = np.dtype(_DTYPES[code])
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(n_items * dtype.itemsize), dtype=dtype)
            arrays[name] = data.reshape(shape).copy()
        return arrays, meta
