"""Dense float64 kernels: products, SPD factorization/inversion, triangular masking.

Pure functions over immutable inputs (numpy + scipy LAPACK bindings); nothing
here holds state, so every call is safe from any thread. Matrices are
row-major ``float64`` arrays. Damping policy is not this module's business:
``cholesky_lower`` adds only the jitter the caller passes and fails loudly
otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import lapack, solve_triangular

from cae_quant.errors import FactorizationError, InputError, ShapeError

#: A dense, finite, row-major float64 matrix.
Matrix = NDArray[np.float64]

#: Relative tolerance for the symmetry precondition of the SPD kernels.
_SYMMETRY_RTOL = 1e-10


def as_matrix(data: ArrayLike, *, name: str = "matrix") -> Matrix:
    """Coerce ``data`` to a C-contiguous float64 2-D array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class LowerTriangular:
    """A lower-triangular factor with a strictly positive diagonal.

    ``values`` is stored full (n x n) with exact zeros above the diagonal.
    """

    values: Matrix

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"lower-triangular factor must be square, got {v.shape}")
        if np.any(np.triu(v, k=1) != 0.0):
            raise InputError("lower-triangular factor has non-zero entries above the diagonal")
        if np.any(np.diag(v) <= 0.0):
            raise InputError("lower-triangular factor must have a positive diagonal")

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def diagonal(self) -> NDArray[np.float64]:
        return np.diag(self.values).copy()

    def gram(self) -> Matrix:
        """``L @ L.T``."""
        return self.values @ self.values.T


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """``a @ b`` with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _require_symmetric(s: Matrix, name: str) -> None:
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"{name} must be square, got {s.shape}")
    scale = float(np.max(np.abs(s))) if s.size else 0.0
    if not np.allclose(s, s.T, rtol=_SYMMETRY_RTOL, atol=_SYMMETRY_RTOL * scale):
        raise InputError(f"{name} must be symmetric")


def cholesky_lower(s: Matrix, jitter: float = 0.0) -> LowerTriangular:
    """Lower Cholesky factor ``G`` with ``G @ G.T == s + jitter * I``.

    Uses LAPACK ``dpotrf`` directly so a failure reports the pivot: the
    0-based index of the first leading minor that is not positive definite.
    """
    _require_symmetric(s, "cholesky input")
    n = s.shape[0]
    shifted = s + jitter * np.eye(n) if jitter else s.copy()
    factor, info = lapack.dpotrf(shifted, lower=1, clean=1)
    if info > 0:
        pivot = int(info) - 1
        raise FactorizationError(
            f"matrix is not positive definite (jitter={jitter:g}); failed at pivot {pivot}",
            pivot=pivot,
        )
    if info < 0:
        raise InputError(f"dpotrf rejected argument {-int(info)}")
    return LowerTriangular(np.ascontiguousarray(factor))


def invert_spd(s: Matrix) -> Matrix:
    """Inverse of a symmetric positive definite matrix via its Cholesky factor."""
    g = cholesky_lower(s)
    g_inv = solve_triangular(g.values, np.eye(g.n), lower=True)
    inv: Matrix = g_inv.T @ g_inv
    return inv


def strict_upper_hadamard(m: Matrix) -> Matrix:
    """Apply the strictly-upper mask: keep ``m[i, j]`` for ``j > i``, zero elsewhere."""
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"mask needs a square matrix, got {m.shape}")
    masked: Matrix = np.triu(m, k=1)
    return masked


def frobenius_sq(m: Matrix) -> float:
    """Squared Frobenius norm."""
    return float(np.sum(m * m))


def relative_diff(a: NDArray[np.float64], b: NDArray[np.float64]) -> float:
    """``‖a − b‖ / max(‖a‖, ‖b‖)``; 0.0 when both are exactly zero."""
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare {a.shape} with {b.shape}")
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b)) / scale
