"""
Binary file formats used by the simulator

FVEC1  features:  b"FVEC1" | u32 LE rows | u32 LE dim  | rows*dim float32 LE (row-major)
FLAB1  labels:    b"FLAB1" | u32 LE count             | count uint16 LE
HEAD1  head:      b"HEAD1" | u32 LE rows | u32 LE cols | rows*cols float64 LE (row-major)
"""

import os
import tempfile
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from services.datamodel import HeadParams
from services.errors import RejectedInputError


PathLike = Union[str, Path]

FVEC_MAGIC = b"FVEC1"
FLAB_MAGIC = b"FLAB1"
HEAD_MAGIC = b"HEAD1"

_U32 = np.dtype('<u4')
_MAX_U32 = 2 ** 32 - 1


def atomic_write_bytes(path: PathLike, payload: bytes):
    """Write to a temp file in the target directory, then os.replace it into place"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _read_header(data: bytes, magic: bytes, fields: int, path: PathLike) -> Tuple[int, ...]:
    size = len(magic) + 4 * fields
    if len(data) < size or data[:len(magic)] != magic:
        raise RejectedInputError(f"{path}: not a {magic.decode()} file")
    return tuple(int(v) for v in np.frombuffer(data, dtype=_U32, count=fields, offset=len(magic)))


def _check_u32(*values: int):
    for v in values:
        if not 0 <= v <= _MAX_U32:
            raise RejectedInputError(f"{v} does not fit a u32 header field")


# ============================================================================
# FVEC1
# ============================================================================

def write_fvec(path: PathLike, matrix: np.ndarray):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise RejectedInputError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    rows, dim = matrix.shape
    _check_u32(rows, dim)
    payload = (
        FVEC_MAGIC
        + np.array([rows, dim], dtype=_U32).tobytes()
        + np.ascontiguousarray(matrix, dtype='<f4').tobytes()
    )
    atomic_write_bytes(path, payload)


def read_fvec(path: PathLike) -> np.ndarray:
    """Read an FVEC1 file into a float64 (rows x dim) matrix"""
    data = Path(path).read_bytes()
    rows, dim = _read_header(data, FVEC_MAGIC, 2, path)
    expected = len(FVEC_MAGIC) + 8 + 4 * rows * dim
    if len(data) != expected:
        raise RejectedInputError(f"{path}: expected {expected} bytes for {rows}x{dim}, found {len(data)}")
    values = np.frombuffer(data, dtype='<f4', count=rows * dim, offset=len(FVEC_MAGIC) + 8)
    return values.reshape(rows, dim).astype(np.float64)


# ============================================================================
# FLAB1
# ============================================================================

def write_flab(path: PathLike, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise RejectedInputError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max):
        raise RejectedInputError("labels must fit in uint16")
    _check_u32(labels.size)
    payload = (
        FLAB_MAGIC
        + np.array([labels.size], dtype=_U32).tobytes()
        + labels.astype('<u2').tobytes()
    )
    atomic_write_bytes(path, payload)


def read_flab(path: PathLike) -> np.ndarray:
    """Read an FLAB1 file into an int64 vector (labels exactly as stored)"""
    data = Path(path).read_bytes()
    (count,) = _read_header(data, FLAB_MAGIC, 1, path)
    expected = len(FLAB_MAGIC) + 4 + 2 * count
    if len(data) != expected:
        raise RejectedInputError(f"{path}: expected {expected} bytes for {count} labels, found {len(data)}")
    return np.frombuffer(data, dtype='<u2', count=count, offset=len(FLAB_MAGIC) + 4).astype(np.int64)


# ============================================================================
# HEAD1
# ============================================================================

def write_head(path: PathLike, params: HeadParams):
    rows, cols = params.matrix.shape
    payload = (
        HEAD_MAGIC
        + np.array([rows, cols], dtype=_U32).tobytes()
        + np.ascontiguousarray(params.matrix, dtype='<f8').tobytes()
    )
    atomic_write_bytes(path, payload)


def read_head(path: PathLike) -> HeadParams:
    data = Path(path).read_bytes()
    rows, cols = _read_header(data, HEAD_MAGIC, 2, path)
    expected = len(HEAD_MAGIC) + 8 + 8 * rows * cols
    if len(data) != expected:
        raise RejectedInputError(f"{path}: expected {expected} bytes for a {rows}x{cols} head, found {len(data)}")
    values = np.frombuffer(data, dtype='<f8', count=rows * cols, offset=len(HEAD_MAGIC) + 8)
    return HeadParams(values.reshape(rows, cols))


__all__ = [
    'atomic_write_bytes',
    'write_fvec',
    'read_fvec',
    'write_flab',
    'read_flab',
    'write_head',
    'read_head',
]
