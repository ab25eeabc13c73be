"""Truncated SVD via one-sided Jacobi rotations.

The working copy is float64. Column pairs are rotated until every
normalized off-diagonal product |w_i . w_j| / (|w_i| |w_j|) falls below
1e-10, or 30 sweeps elapse. Singular values are the surviving column
norms, sorted descending. Accurate and dependency-free at the matrix
sizes this package uses (<= 512 x 512).
"""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError
from .matrix import Matrix, check_matrix

_TOL = 1e-10
_MAX_SWEEPS = 30


def _jacobi(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Orthogonalize the columns of w = a  (m x n, m >= n), accumulating v.
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    for _ in range(_MAX_SWEEPS):
        worst = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                wi = w[:, i]
                wj = w[:, j]
                aii = wi @ wi
                ajj = wj @ wj
                aij = wi @ wj
                denom = np.sqrt(aii * ajj)
                if denom == 0.0:
                    continue
                ratio = abs(aij) / denom
                worst = max(worst, ratio)
                if ratio <= _TOL:
                    continue
                zeta = (ajj - aii) / (2.0 * aij)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                col_i = c * wi - s * wj
                col_j = s * wi + c * wj
                w[:, i] = col_i
                w[:, j] = col_j
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if worst <= _TOL:
            break

    norms = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    w = w[:, order]
    v = v[:, order]
    u = np.zeros((m, n))
    nonzero = norms > 0.0
    u[:, nonzero] = w[:, nonzero] / norms[nonzero]
    return u, norms, v


def svd_truncated(m: Matrix, r: int) -> tuple[Matrix, np.ndarray, Matrix]:
    """Best rank-r factorization m ~ U @ diag(S) @ V.T.

    Returns (U: rows x r, S: length-r non-negative descending, V: cols x r).
    """
    check_matrix(m, "m")
    rows, cols = m.shape
    if r <= 0 or r > min(rows, cols):
        raise ParameterError(f"rank {r} invalid for shape {m.shape}")

    a = m.astype(np.float64)
    if rows >= cols:
        u, s, v = _jacobi(a)
    else:
        # m = (m.T).T: factor the tall transpose and swap the bases.
        v, s, u = _jacobi(a.T)

    u32 = np.ascontiguousarray(u[:, :r].astype(np.float32))
    v32 = np.ascontiguousarray(v[:, :r].astype(np.float32))
    s32 = np.ascontiguousarray(s[:r].astype(np.float32))
    u32.setflags(write=False)
    v32.setflags(write=False)
    s32.setflags(write=False)
    return u32, s32, v32
