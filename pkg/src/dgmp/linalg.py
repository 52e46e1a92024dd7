"""Dense linear algebra used by the pooling and gradient code.

Matrices and vectors are plain float64 numpy arrays. The helpers here add
the validation and the symmetric-positive-definite machinery the ridge
solves need: an exactly symmetric Gram matrix and a Cholesky solve with a
single jitter retry.

Factorizations and triangular solves are counted so tests can assert how
many solves an operation performs (see :func:`solve_counts`).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, InvalidInput, NotPositiveDefinite

SYMMETRY_RTOL = 1e-10
JITTER_SCALE = 1e-10

_lock = threading.Lock()
_counts = {"factorizations": 0, "solves": 0}


def _bump(key):
    with _lock:
        _counts[key] += 1


def solve_counts():
    """Snapshot of ``{"factorizations": int, "solves": int}`` since import."""
    with _lock:
        return dict(_counts)


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionMismatch(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return a


def as_vector(v, name="vector"):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise DimensionMismatch(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return v


def gram(phi):
    """``phi.T @ phi``, mirrored from the upper triangle so it is exactly symmetric."""
    phi = as_matrix(phi, "phi")
    k = phi.T @ phi
    upper = np.triu(k)
    return upper + np.triu(k, 1).T


def transpose(a):
    return as_matrix(a).T.copy()


def matvec(a, v):
    a = as_matrix(a)
    v = as_vector(v)
    if a.shape[1] != v.shape[0]:
        raise DimensionMismatch(f"cannot multiply {a.shape} by vector of length {v.shape[0]}")
    return a @ v


def matmul(a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    ``jitter`` is the diagonal shift that was needed for the factorization
    to succeed (0.0 on the first attempt).
    """

    lower: np.ndarray
    jitter: float = 0.0

    @property
    def n(self):
        return self.lower.shape[0]

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise DimensionMismatch(f"rhs has {b.shape[0]} rows, factor is {self.n}x{self.n}")
        _bump("solves")
        return scipy.linalg.cho_solve((self.lower, True), b, check_finite=False)


def _symmetrized(a):
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise DimensionMismatch(f"expected a square matrix, got {a.shape}")
    scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
    if np.max(np.abs(a - a.T)) > SYMMETRY_RTOL * scale:
        raise InvalidInput("matrix is not symmetric")
    return 0.5 * (a + a.T)


def cholesky(a):
    """Factor ``a``; on failure retry once with ``1e-10 * trace(a) / n`` added to the diagonal."""
    a = _symmetrized(a)
    n = a.shape[0]
    _bump("factorizations")
    try:
        return SpdFactor(np.linalg.cholesky(a))
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_SCALE * np.trace(a) / n
    try:
        if not jitter > 0:
            raise np.linalg.LinAlgError("non-positive trace")
        return SpdFactor(np.linalg.cholesky(a + jitter * np.eye(n)), jitter)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(
            f"Cholesky factorization failed for a {n}x{n} matrix even with jitter {jitter:.3g}"
        ) from None


def spd_solve(a, b):
    a = as_matrix(a, "a")
    b = as_vector(b, "b")
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"system matrix {a.shape} does not match rhs of length {b.shape[0]}")
    return cholesky(a).solve(b)
