"""Little-endian raster container used for dataset frames, labels and feature dumps.

Layout (all integers little-endian)::

    offset  size      field
    0       8         magic  b"MMRAST01"
    8       1         dtype code (see DTYPE_CODES)
    9       1         ndim
    10      2         reserved, zero
    12      4*ndim    shape, uint32 each
    ...               payload, row-major, little-endian
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMRAST01"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_CODE_OF = {(dt.kind, dt.itemsize): code for code, dt in DTYPE_CODES.items()}


class RasterFormatError(ValueError):
    pass


def encode_raster(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_OF.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise RasterFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise RasterFormatError("too many dimensions")
    header = MAGIC + struct.pack("<BBH", code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_raster(buf: bytes) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise RasterFormatError("bad magic")
    code, ndim, _ = struct.unpack_from("<BBH", buf, 8)
    if code not in DTYPE_CODES:
        raise RasterFormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", buf, 12)
    start = 12 + 4 * ndim
    dt = DTYPE_CODES[code]
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) - start != n * dt.itemsize:
        raise RasterFormatError(f"payload size {len(buf) - start} does not match shape {shape}")
    return np.frombuffer(buf, dtype=dt, count=n, offset=start).reshape(shape).copy()


def save_raster(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_raster(arr))


def load_raster(path: str | Path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read raster {path}: {e}") from e
    return decode_raster(buf)
