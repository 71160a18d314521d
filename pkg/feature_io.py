"""
FDMP binary dumps for features and logits, plus labeled CSV export.

FDMP layout (little-endian):
    magic   4 bytes  b'FDMP'
    version u32      1
    dtype   u8       0 = float32, 1 = float64
    ndim    u8       1..4
    dims    ndim × u64
    payload row-major values

Concurrent writes to one path are undefined; reads are thread-safe.
"""

import logging
import os
import struct
from typing import List, Sequence

import numpy as np
import pandas as pd

from errors import (BadDtypeError, BadMagicError, BadNdimError, BadVersionError, DimensionError,
                    LabelCountError, LengthMismatchError, NonFiniteDumpError)

logger = logging.getLogger(__name__)

MAGIC = b'FDMP'
VERSION = 1
DTYPE_FLOAT32 = 0
DTYPE_FLOAT64 = 1
_DTYPES = {DTYPE_FLOAT32: np.dtype('<f4'), DTYPE_FLOAT64: np.dtype('<f8')}
_PREFIX = struct.Struct('<4sIBB')


def header_size(ndim: int) -> int:
    return _PREFIX.size + 8 * ndim


def write_dump(tensor, path: str, dtype: int = DTYPE_FLOAT64):
    """Write a 1-4 dimensional tensor as an FDMP file."""
    arr = np.asarray(tensor, dtype=np.float64)
    if not 1 <= arr.ndim <= 4:
        raise BadNdimError(f"FDMP supports 1-4 dims, got {arr.ndim}")
    if dtype not in _DTYPES:
        raise BadDtypeError(f"unknown dtype code {dtype}")
    header = _PREFIX.pack(MAGIC, VERSION, dtype, arr.ndim) + struct.pack(f'<{arr.ndim}Q', *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    try:
        with open(path, 'wb') as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise OSError(f"failed to write dump {path}: {e}") from e
    logger.info(f"Wrote dump {path} shape={arr.shape} dtype={dtype}")


def read_dump(path: str, allow_nonfinite: bool = False) -> np.ndarray:
    """Read and validate an FDMP file; float32 payloads are widened to float64."""
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise OSError(f"failed to read dump {path}: {e}") from e

    if len(raw) < _PREFIX.size:
        raise LengthMismatchError(f"{path}: file too short for an FDMP header ({len(raw)} bytes)")
    magic, version, dtype, ndim = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    if dtype not in _DTYPES:
        raise BadDtypeError(f"{path}: unknown dtype code {dtype}")
    if not 1 <= ndim <= 4:
        raise BadNdimError(f"{path}: ndim {ndim} outside 1..4")
    if len(raw) < header_size(ndim):
        raise LengthMismatchError(f"{path}: truncated header")

    dims = struct.unpack_from(f'<{ndim}Q', raw, _PREFIX.size)
    count = int(np.prod(dims, dtype=np.uint64))
    expected = count * _DTYPES[dtype].itemsize
    payload_len = len(raw) - header_size(ndim)
    if payload_len != expected:
        raise LengthMismatchError(f"{path}: payload is {payload_len} bytes, header declares {expected}")

    arr = np.frombuffer(raw, dtype=_DTYPES[dtype], count=count, offset=header_size(ndim))
    arr = arr.astype(np.float64).reshape(dims)
    if not allow_nonfinite and not np.all(np.isfinite(arr)):
        raise NonFiniteDumpError(f"{path}: payload contains NaN or Inf")
    return arr


def export_csv(matrix, path: str, row_labels: Sequence[str], col_labels: Sequence[str]):
    """Labeled CSV with 17 significant digits (float64 round-trip safe)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f"export_csv needs a 2-D matrix, got shape {matrix.shape}")
    if len(row_labels) != matrix.shape[0]:
        raise LabelCountError(f"{len(row_labels)} row labels for {matrix.shape[0]} rows")
    if len(col_labels) != matrix.shape[1]:
        raise LabelCountError(f"{len(col_labels)} column labels for {matrix.shape[1]} columns")
    df = pd.DataFrame(matrix, index=list(row_labels), columns=list(col_labels))
    try:
        df.to_csv(path, float_format='%.17g')
    except OSError as e:
        raise OSError(f"failed to write CSV {path}: {e}") from e
    logger.info(f"Exported {matrix.shape[0]}x{matrix.shape[1]} matrix to {path}")


def read_csv_matrix(path: str):
    """Parse a CSV written by export_csv into (matrix, row_labels, col_labels)."""
    df = pd.read_csv(path, index_col=0, float_precision='round_trip')
    return df.to_numpy(dtype=np.float64), [str(r) for r in df.index], [str(c) for c in df.columns]


def list_dumps(directory: str) -> List[str]:
    """FDMP files in a directory, in lexicographic order."""
    names = sorted(n for n in os.listdir(directory) if n.endswith('.fdmp'))
    return [os.path.join(directory, n) for n in names]
