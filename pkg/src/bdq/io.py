"""Binary and CSV matrix formats.

``BDQ1``: magic, u32 LE rows, u32 LE cols, then rows*cols float64 LE row-major.
``BDQI``: same header with magic ``BDQI`` and int32 LE payload (quantized codes).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from bdq.errors import ParameterError

FLOAT_MAGIC = b"BDQ1"
INT_MAGIC = b"BDQI"
_HEADER = struct.Struct("<4sII")


def _pack(magic: bytes, arr: np.ndarray, dtype: str) -> bytes:
    if arr.ndim != 2:
        raise ParameterError("only 2-D arrays can be serialized")
    rows, cols = arr.shape
    return _HEADER.pack(magic, rows, cols) + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _unpack(buf: bytes, magic: bytes, dtype: str) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ParameterError("truncated header")
    got, rows, cols = _HEADER.unpack_from(buf)
    if got != magic:
        raise ParameterError(f"bad magic {got!r}, expected {magic!r}")
    itemsize = np.dtype(dtype).itemsize
    expected = _HEADER.size + rows * cols * itemsize
    if len(buf) != expected:
        raise ParameterError(f"payload size {len(buf)} does not match {rows}x{cols} (want {expected})")
    return np.frombuffer(buf, dtype=dtype, offset=_HEADER.size).reshape(rows, cols).copy()


def matrix_to_bytes(W: np.ndarray) -> bytes:
    return _pack(FLOAT_MAGIC, np.asarray(W, dtype=np.float64), "<f8")


def matrix_from_bytes(buf: bytes) -> np.ndarray:
    return _unpack(buf, FLOAT_MAGIC, "<f8").astype(np.float64)


def codes_to_bytes(codes: np.ndarray) -> bytes:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < np.iinfo(np.int32).min or codes.max() > np.iinfo(np.int32).max):
        raise ParameterError("codes do not fit in int32")
    return _pack(INT_MAGIC, codes, "<i4")


def codes_from_bytes(buf: bytes) -> np.ndarray:
    return _unpack(buf, INT_MAGIC, "<i4").astype(np.int64)


def write_matrix(path, W) -> None:
    Path(path).write_bytes(matrix_to_bytes(W))


def read_matrix(path) -> np.ndarray:
    return matrix_from_bytes(Path(path).read_bytes())


def write_csv_matrix(path, W) -> None:
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    # repr round-trips float64 exactly
    lines = [",".join(repr(float(v)) for v in row) for row in W]
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv_matrix(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ParameterError(f"{path}: empty CSV")
    data = [[float(v) for v in line.split(",")] for line in rows]
    if len({len(r) for r in data}) != 1:
        raise ParameterError(f"{path}: ragged rows")
    return np.array(data, dtype=np.float64)


def load_any(path) -> np.ndarray:
    """Read a matrix from BDQ1 or CSV, chosen by content."""
    p = Path(path)
    head = p.read_bytes()[:4]
    if head == FLOAT_MAGIC:
        return read_matrix(p)
    return read_csv_matrix(p)


def dumps_json(obj) -> str:
    # Stable key order and fixed separators keep reports byte-identical across runs.
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))
