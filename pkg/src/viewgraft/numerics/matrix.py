"""Dense 2-D float32 matrices.

Matrices are numpy arrays with a locked layout: two-dimensional, C-order,
float32, read-only. Storage stays in 32 bits; reductions (matmul, norms)
accumulate in 64 bits before rounding back. All constructors verify that
every entry is finite.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

# The universal numeric carrier: a read-only 2-D float32 ndarray.
Matrix = np.ndarray


def matrix(data) -> Matrix:
    """Coerce ``data`` to a finite, read-only 2-D float32 array."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got ndim={arr.ndim}")
    arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ShapeError("matrix entries must be finite")
    arr.setflags(write=False)
    return arr


def zeros(rows: int, cols: int) -> Matrix:
    arr = np.zeros((rows, cols), dtype=np.float32)
    arr.setflags(write=False)
    return arr


def ones(rows: int, cols: int) -> Matrix:
    arr = np.ones((rows, cols), dtype=np.float32)
    arr.setflags(write=False)
    return arr


def eye(n: int) -> Matrix:
    arr = np.eye(n, dtype=np.float32)
    arr.setflags(write=False)
    return arr


def check_matrix(m, name: str = "matrix") -> Matrix:
    if not isinstance(m, np.ndarray) or m.ndim != 2 or m.dtype != np.float32:
        raise ShapeError(f"{name} must be a 2-D float32 array")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with float64 accumulation, rounded back to float32."""
    check_matrix(a, "a")
    check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    out.setflags(write=False)
    return out


def frobenius(m: Matrix) -> float:
    """Frobenius norm, accumulated in float64."""
    return float(np.sqrt(np.sum(m.astype(np.float64) ** 2)))


def rel_frobenius(a: Matrix, b: Matrix) -> float:
    """Relative Frobenius distance ||a - b|| / max(||b||, tiny)."""
    diff = a.astype(np.float64) - b.astype(np.float64)
    denom = max(frobenius(b), 1e-30)
    return float(np.sqrt(np.sum(diff**2)) / denom)
