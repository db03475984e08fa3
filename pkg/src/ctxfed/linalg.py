"""Dense kernels used by the aggregation solvers.

Everything here works on float64 numpy arrays. Matrices are 2-d arrays,
vectors 1-d; the helpers validate shape and finiteness and raise
:class:`~ctxfed.errors.InvalidInputError` otherwise.
"""

from __future__ import annotations

import numpy as np

from ctxfed.errors import InvalidInputError

DEFAULT_RANK_TOL = 1e-10


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return arr


def numerical_rank(singular_values: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> int:
    """Count singular values above ``tol`` times the largest one."""
    if singular_values.size == 0 or singular_values[0] == 0.0:
        return 0
    return int(np.count_nonzero(singular_values > tol * singular_values[0]))


def nullspace_basis(m, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis of ``{v : m @ v = 0}``, one basis vector per row.

    The returned array has shape ``(cols - rank, cols)``. Rank is decided by
    singular values relative to the largest one, so a full-row-rank ``K x n``
    input yields exactly ``n - K`` rows.
    """
    m = as_matrix(m)
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    rows, cols = m.shape
    if rows > cols:
        raise InvalidInputError(f"expected rows <= cols, got {m.shape}")
    if rows == 0:
        return np.eye(cols)
    _, s, vh = np.linalg.svd(m, full_matrices=True)
    rank = numerical_rank(s, tol)
    return vh[rank:].copy()


def matrix_rank(m, tol: float = DEFAULT_RANK_TOL) -> int:
    m = as_matrix(m)
    if m.size == 0:
        return 0
    return numerical_rank(np.linalg.svd(m, compute_uv=False), tol)


def least_squares(a, b) -> np.ndarray:
    """Minimum-norm least-squares solution of ``a @ v = b`` (any shape)."""
    a = as_matrix(a, "a")
    b = as_vector(b, "b")
    if a.shape[0] != b.shape[0]:
        raise InvalidInputError(f"a has {a.shape[0]} rows but b has dim {b.shape[0]}")
    v, *_ = np.linalg.lstsq(a, b, rcond=None)
    return v


def solve_square(a, b) -> np.ndarray:
    """Solve a square system, falling back to min-norm least squares.

    An LU solve is accepted when it is finite and its residual is at the
    level of rounding error; singular or numerically singular systems go
    through :func:`least_squares` instead.
    """
    a = as_matrix(a, "a")
    b = as_vector(b, "b")
    n = a.shape[0]
    if a.shape != (n, n):
        raise InvalidInputError(f"a must be square, got {a.shape}")
    if b.shape[0] != n:
        raise InvalidInputError(f"a is {n}x{n} but b has dim {b.shape[0]}")
    try:
        v = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        return least_squares(a, b)
    if np.all(np.isfinite(v)):
        resid = np.max(np.abs(a @ v - b), initial=0.0)
        scale = np.max(np.abs(a), initial=0.0) * np.max(np.abs(v), initial=0.0) * n
        scale += np.max(np.abs(b), initial=0.0)
        if resid <= 1e-10 * scale or resid == 0.0:
            return v
    return least_squares(a, b)


def inner(u, v) -> float:
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape:
        raise InvalidInputError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    return float(u @ v)


def norm(u) -> float:
    return float(np.linalg.norm(as_vector(u)))
