"""Per-layer calibration: Hessian, damping, act-order, inverse-Cholesky factor and P1/P2.

Everything returned here is immutable once built and is read concurrently by
the engine's row tiles. All matrices in a :class:`CalibState` are expressed in
*processing* order (after the act-order permutation, if any).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import solve_triangular

from cae_quant.errors import CalibrationError, FactorizationError, InputError, ShapeError
from cae_quant.linalg import LowerTriangular, Matrix, as_matrix, cholesky_lower
from cae_quant.linalg import strict_upper_hadamard as _mask_strict_upper
from cae_quant.models import MethodSpec

logger = logging.getLogger(__name__)

Permutation = NDArray[np.int64]

#: Absolute floor factor for the damping term.
DAMPING_FLOOR = 1e-8


# --------------------------------------------------------------------------- #
# Layer problem
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class LayerProblem:
    """One linear layer to quantize.

    ``weight`` is m x n. ``x`` is the quant-flow input and ``x_fp`` the
    full-precision-flow input, both n x k. ``column_order[j]`` is the original
    index of the column found at position ``j``; it is the identity until a
    permutation is applied.
    """

    weight: Matrix
    x: Matrix
    x_fp: Matrix
    column_order: Permutation = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self) -> None:
        if self.weight.ndim != 2:
            raise ShapeError(f"W must be 2-D, got shape {self.weight.shape}")
        m, n = self.weight.shape
        if self.x.ndim != 2 or self.x.shape[0] != n:
            raise ShapeError(
                f"X must have {n} rows to match W {self.weight.shape}, got {self.x.shape}"
            )
        if self.x_fp.shape != self.x.shape:
            raise ShapeError(f"X̃ {self.x_fp.shape} must match X {self.x.shape}")
        if n < 1 or m < 1 or self.x.shape[1] < 1:
            raise ShapeError(f"layer dimensions must be >= 1, got m={m} n={n} k={self.k}")
        if self.column_order.size == 0:
            object.__setattr__(self, "column_order", np.arange(n, dtype=np.int64))
        elif not _is_permutation(self.column_order, n):
            raise ShapeError(f"column_order is not a permutation of {n} columns")

    @classmethod
    def create(
        cls, weight: ArrayLike, x: ArrayLike, x_fp: ArrayLike | None = None
    ) -> LayerProblem:
        """Validate and upcast raw arrays; ``x_fp`` defaults to ``x``."""
        w = as_matrix(weight, name="W")
        xq = as_matrix(x, name="X")
        xf = xq if x_fp is None else as_matrix(x_fp, name="X̃")
        return cls(weight=w, x=xq, x_fp=xf)

    @property
    def m(self) -> int:
        return int(self.weight.shape[0])

    @property
    def n(self) -> int:
        return int(self.weight.shape[1])

    @property
    def k(self) -> int:
        return int(self.x.shape[1])

    @property
    def delta_x(self) -> Matrix:
        """ΔX = X̃ − X."""
        return self.x_fp - self.x

    def rows(self, start: int, stop: int) -> LayerProblem:
        """The same layer restricted to weight rows ``start:stop``."""
        return LayerProblem(
            weight=self.weight[start:stop],
            x=self.x,
            x_fp=self.x_fp,
            column_order=self.column_order,
        )


def _is_permutation(perm: NDArray[np.int64], n: int) -> bool:
    return perm.shape == (n,) and bool(np.array_equal(np.sort(perm), np.arange(n)))


# --------------------------------------------------------------------------- #
# Calibration state
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class CalibState:
    """Calibration products for one layer, in processing order.

    ``p1`` is only built when the method uses asymmetric calibration and
    ``p2`` only when it uses the compensation-aware term. ``symmetric`` is
    true when ΔX was treated as zero (GPTQ bases).
    """

    hessian: Matrix
    damping: float
    factor: LowerTriangular
    dxxt: Matrix
    p1: Matrix | None
    p2: Matrix | None
    perm: Permutation
    symmetric: bool

    @property
    def n(self) -> int:
        return self.factor.n

    @property
    def nbytes(self) -> int:
        mats = [self.hessian, self.factor.values, self.dxxt, self.p1, self.p2]
        return sum(int(a.nbytes) for a in mats if a is not None)


def build_hessian(x: Matrix, lambda_frac: float) -> tuple[Matrix, float]:
    """``H = X·Xᵀ`` and the damping ``λ = lambda_frac · mean(diag H)``.

    λ is floored at ``1e-8 · (1 + mean|H|)`` so ``H + λI`` stays positive
    definite even for an all-zero input.
    """
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"X must be n x k with k >= 1, got {x.shape}")
    if lambda_frac < 0:
        raise InputError(f"lambda_frac must be >= 0, got {lambda_frac}")
    h: Matrix = x @ x.T
    floor = DAMPING_FLOOR * (1.0 + float(np.mean(np.abs(h))))
    damping = max(lambda_frac * float(np.mean(np.diag(h))), floor)
    return h, damping


def act_order_permutation(h: Matrix) -> Permutation:
    """Column order by descending Hessian diagonal; ties keep the original order."""
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ShapeError(f"Hessian must be square, got {h.shape}")
    return np.argsort(-np.diag(h), kind="stable").astype(np.int64)


def apply_permutation(problem: LayerProblem, perm: ArrayLike) -> LayerProblem:
    """Permute W's columns and the rows of X and X̃ together.

    The composed order is carried in ``column_order`` so :func:`restore_columns`
    can un-permute the quantized result.
    """
    p = np.asarray(perm, dtype=np.int64)
    if not _is_permutation(p, problem.n):
        raise ShapeError(f"permutation of length {p.size} does not fit {problem.n} columns")
    return LayerProblem(
        weight=problem.weight[:, p],
        x=problem.x[p],
        x_fp=problem.x_fp[p],
        column_order=problem.column_order[p],
    )


def restore_columns(q: Matrix, column_order: Permutation) -> Matrix:
    """Scatter processing-order columns back to their original positions."""
    out = np.empty_like(q)
    out[:, column_order] = q
    return out


def inverse_cholesky(h: Matrix, damping: float) -> LowerTriangular:
    """Lower-triangular ``L`` with ``L·Lᵀ = (H + λI)⁻¹``.

    The damped Hessian is factorized in reversed index order, which yields an
    upper factor ``V`` with ``H + λI = V·Vᵀ``; then ``L = (V⁻¹)ᵀ``. The full
    inverse is never formed. ``L`` has the property the column sweep relies on:
    ``(H + λI)[q:, q:]⁻¹ = L[q:, q:]·L[q:, q:]ᵀ`` for every ``q``.
    """
    n = h.shape[0]
    try:
        g = cholesky_lower(h[::-1, ::-1], jitter=damping)
    except FactorizationError as exc:
        pivot = n - 1 - exc.pivot
        raise CalibrationError(
            f"damped Hessian is not positive definite (λ={damping:g}) at column {pivot}",
            pivot=pivot,
        ) from exc
    upper = np.ascontiguousarray(g.values[::-1, ::-1])
    inv_upper = solve_triangular(upper, np.eye(n), lower=False)
    return LowerTriangular(np.ascontiguousarray(np.tril(inv_upper.T)))


def precompute_p(m: Matrix, factor: LowerTriangular) -> Matrix:
    """``P = ((M·L) ⊙ M_U)·Lᵀ`` with ``M_U`` the strictly-upper mask.

    Row ``i`` equals ``M[i, i+1:] · L[i+1:, i+1:] · L[i+1:, i+1:]ᵀ`` placed in
    columns ``i+1:``; the result is strictly upper-triangular.
    """
    if m.shape != factor.values.shape:
        raise ShapeError(f"M {m.shape} does not match L {factor.values.shape}")
    lv = factor.values
    p: Matrix = _mask_strict_upper(m @ lv) @ lv.T
    return p


def calibrate(problem: LayerProblem, spec: MethodSpec) -> CalibState:
    """Build the calibration state a method needs for ``problem``.

    Without asymmetric calibration ΔX is taken as zero, so the
    compensation-aware term is referenced to the quant-flow input.
    """
    x = problem.x
    symmetric = not spec.use_p1
    x_ref = x if symmetric else problem.x_fp

    h, damping = build_hessian(x, spec.lambda_frac)
    perm = act_order_permutation(h) if spec.act_order else np.arange(problem.n, dtype=np.int64)
    h = h[np.ix_(perm, perm)]
    dxxt = np.zeros_like(h) if symmetric else ((x_ref - x) @ x.T)[np.ix_(perm, perm)]

    factor = inverse_cholesky(h, damping)
    p1 = precompute_p(dxxt, factor) if spec.use_p1 else None
    p2 = precompute_p(h + dxxt, factor) if spec.use_p2 else None

    logger.debug(
        "calibration built",
        extra={"n": problem.n, "damping": damping, "act_order": spec.act_order},
    )
    return CalibState(
        hessian=h,
        damping=damping,
        factor=factor,
        dxxt=dxxt,
        p1=p1,
        p2=p2,
        perm=perm,
        symmetric=symmetric,
    )
