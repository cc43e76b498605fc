"""Versioned little-endian binary container used by all persisted artifacts.

Layout (all integers little-endian):

    magic       8 bytes, ASCII, zero padded ("GMKNET1", "GMKBODY1", ...)
    version     uint32
    meta_len    uint32
    meta        UTF-8 JSON with sorted keys (scalars and strings only)
    n_arrays    uint32
    per array:
        name_len    uint16
        name        UTF-8
        dtype_code  uint8   (0 = float64, 1 = int64, 2 = uint8)
        ndim        uint8
        dims        uint32 * ndim
        data        raw little-endian bytes, C order

Writers emit arrays in sorted name order, so equal content gives
byte-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1, np.dtype("u1"): 2}


def write_blob(path, magic: str, meta: dict, arrays: dict[str, np.ndarray], version: int = 1) -> None:
    if len(magic) > 8:
        raise ValueError("magic must be at most 8 bytes")
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic.encode("ascii").ljust(8, b"\0"))
        fh.write(struct.pack("<II", version, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype == np.float32:
                arr = arr.astype("<f8")
            if arr.dtype in (np.int32, np.dtype("int64")):
                arr = arr.astype("<i8")
            code = _CODES.get(arr.dtype.newbyteorder("<"))
            if code is None:
                raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_DTYPES[code]).tobytes(order="C"))


def read_blob(path, magic: str) -> tuple[int, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        got = fh.read(8).rstrip(b"\0").decode("ascii")
        if got != magic:
            raise ValueError(f"bad magic in {path}: expected {magic!r}, got {got!r}")
        version, meta_len = struct.unpack("<II", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = _DTYPES[code]
            count = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
            arrays[name] = data.reshape(dims).copy()
    return version, meta, arrays
