"""Dense real matrix kernels: Kronecker algebra, exponential, nullspace and pseudoinverse.

All functions take and return float64 ``numpy`` arrays and never mutate their inputs.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

DEFAULT_TOL = 1e-7


def _as_matrix(a, name: str = "a") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def _check_square(a: np.ndarray, name: str = "a") -> None:
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")


def kron(a, b) -> np.ndarray:
    """Kronecker product ``a ⊗ b``."""
    return np.kron(_as_matrix(a, "a"), _as_matrix(b, "b"))


def kron_sum(a, b) -> np.ndarray:
    """Kronecker sum ``a ⊞ b = a ⊗ I + I ⊗ b`` of two square matrices."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    _check_square(a, "a")
    _check_square(b, "b")
    return np.kron(a, np.eye(b.shape[0])) + np.kron(np.eye(a.shape[0]), b)


def direct_sum(*mats) -> np.ndarray:
    """Block-diagonal matrix ``a ⊕ b ⊕ ...``."""
    if not mats:
        raise ValueError("direct_sum needs at least one matrix")
    return scipy.linalg.block_diag(*[_as_matrix(m) for m in mats])


def expm(a) -> np.ndarray:
    """Matrix exponential (Padé scaling-and-squaring)."""
    a = _as_matrix(a)
    _check_square(a)
    return scipy.linalg.expm(a)


def svd_nullspace(c, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Orthonormal basis of the numerical nullspace of ``c``.

    Singular values at or below ``tol * sigma_max`` count as zero. A matrix with no
    rows, or the zero matrix, has the identity as its nullspace basis.

    Returns:
        Array of shape ``(c.shape[1], nullity)`` with orthonormal columns.
    """
    if not 0.0 < tol < 1.0:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] == 0:
        raise ValueError(f"c must be a 2-D matrix with at least one column, got {c.shape}")
    n = c.shape[1]
    if c.shape[0] == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(c, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        return np.eye(n)
    rank = int(np.sum(s > tol * s[0]))
    return vt[rank:].T.copy()


def pinv(a, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse; singular values below ``tol * sigma_max`` are dropped."""
    a = _as_matrix(a)
    return np.linalg.pinv(a, rcond=tol)
