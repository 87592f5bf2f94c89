"""Vector primitives and the cosine-similarity kernel.

Conventions: a single representation is a 1-D float64 array. A batch of
representations (``RepBatch``) is a 2-D float64 array whose *columns* are the
vectors, so an instance batch has shape ``(d1, n)`` and a cluster matrix has
shape ``(n, d2)`` (one column per cluster).
"""

from __future__ import annotations

import numpy as np

from .errors import DimMismatch, ZeroNormVector

__all__ = [
    "as_vec",
    "as_batch",
    "cosine_similarity",
    "cosine_matrix",
    "column_norms",
    "l1_norm",
]


def as_vec(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise DimMismatch(f"expected a non-empty 1-D vector, got shape {u.shape}")
    return u


def as_batch(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] == 0:
        raise DimMismatch(f"expected a 2-D column batch, got shape {u.shape}")
    return u


def l1_norm(u) -> float:
    return float(np.sum(np.abs(np.asarray(u, dtype=np.float64))))


def cosine_similarity(u, v) -> float:
    u = as_vec(u)
    v = as_vec(v)
    if u.shape != v.shape:
        raise DimMismatch(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormVector("cosine similarity undefined for a zero vector")
    s = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, s))


def column_norms(u: np.ndarray) -> np.ndarray:
    """Euclidean norm of every column; raises if any column is zero."""
    norms = np.sqrt(np.einsum("ij,ij->j", u, u))
    if np.any(norms == 0.0):
        raise ZeroNormVector("batch contains a zero-norm column")
    return norms


def cosine_matrix(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``S[i, j] = s(u_i, v_j)`` for column batches, clamped to [-1, 1]."""
    u = as_batch(u)
    v = as_batch(v)
    if u.shape[0] != v.shape[0]:
        raise DimMismatch(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    un = u / column_norms(u)
    vn = v / column_norms(v)
    return np.clip(un.T @ vn, -1.0, 1.0)
