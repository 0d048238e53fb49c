"""Brute-force references for the engine.

Nothing here uses the inverse-Cholesky factor or the P matrices. Each column
step is solved as an explicit equality-constrained least-squares problem, in
two independent ways (variable elimination with a pseudo-inverse, and a
bordered KKT system), and the objectives are evaluated with plain dense
products. Cost is polynomial but high, so whole-layer runs are capped at
:data:`ORACLE_MAX_COLUMNS` columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import NDArray
from scipy import linalg as sla

from cae_quant.calibrator import (
    LayerProblem,
    act_order_permutation,
    apply_permutation,
    build_hessian,
    restore_columns,
)
from cae_quant.errors import OracleSizeError, ShapeError
from cae_quant.linalg import LowerTriangular, Matrix
from cae_quant.models import MethodSpec
from cae_quant.quantizer import QuantGrid

#: Largest layer width :func:`greedy_oracle_run` accepts.
ORACLE_MAX_COLUMNS = 64

ObjectiveMode = Literal["sym", "asym"]
ResidualMode = Literal["column", "full"]


# --------------------------------------------------------------------------- #
# Constrained least squares
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class ConstrainedLSProblem:
    """Equality-constrained least squares for one column step.

    Minimizes ``‖Δ·design − target‖² + damping·‖Δ‖²`` subject to
    ``Δ[:, pinned_index] = pinned_value``.

    ``design`` holds the input rows still free to move ((n − q) x k), so the
    quantized column sits at ``pinned_index = 0`` in the step problem.
    ``target`` is m x k and ``pinned_value`` has one entry per weight row.
    """

    design: Matrix
    target: Matrix
    pinned_value: NDArray[np.float64]
    pinned_index: int = 0
    damping: float = 0.0

    def __post_init__(self) -> None:
        rows, k = self.design.shape
        if k < 1:
            raise ShapeError("design needs at least one sample column")
        if not 0 <= self.pinned_index < rows:
            raise ShapeError(f"pinned_index {self.pinned_index} outside {rows} design rows")
        if self.target.ndim != 2 or self.target.shape[1] != k:
            raise ShapeError(f"target {self.target.shape} does not have {k} columns")
        if self.pinned_value.shape != (self.target.shape[0],):
            m = self.target.shape[0]
            raise ShapeError(f"pinned_value {self.pinned_value.shape} does not match {m} rows")

    @property
    def free(self) -> NDArray[np.int64]:
        rows = self.design.shape[0]
        return np.flatnonzero(np.arange(rows) != self.pinned_index)


@dataclass(frozen=True, eq=False)
class ConstrainedLSSolution:
    delta: Matrix
    rank_deficient: bool = False
    kkt_residual: float | None = None


def solve_constrained_ls(p: ConstrainedLSProblem) -> ConstrainedLSSolution:
    """Eliminate the pinned variable and solve the reduced normal equations.

    With ``Δ = c·e_p + v`` and ``v_p = 0``, each row solves
    ``min_v ‖v·X_rest − (t − c·x_p)‖² + damping·‖v‖²`` through the
    pseudo-inverse of ``X_rest·X_restᵀ + damping·I``. A singular reduced system
    yields the minimum-norm solution and is flagged.
    """
    c = p.pinned_value
    free = p.free
    delta = np.zeros((p.target.shape[0], p.design.shape[0]))
    delta[:, p.pinned_index] = c
    if free.size == 0:
        return ConstrainedLSSolution(delta=delta)

    x_rest = p.design[free]
    residual = p.target - np.outer(c, p.design[p.pinned_index])
    normal = x_rest @ x_rest.T + p.damping * np.eye(free.size)
    rank = int(np.linalg.matrix_rank(normal, hermitian=True))
    delta[:, free] = (residual @ x_rest.T) @ np.linalg.pinv(normal, hermitian=True)
    return ConstrainedLSSolution(delta=delta, rank_deficient=rank < free.size)


def solve_constrained_ls_kkt(p: ConstrainedLSProblem) -> ConstrainedLSSolution:
    """Solve the same problem through its bordered system.

    ``[[N, e_p], [e_pᵀ, 0]] · [δᵀ; μ] = [design·tᵀ; c]`` with
    ``N = design·designᵀ + damping·I``, one right-hand side per weight row.
    """
    rows = p.design.shape[0]
    kkt = np.zeros((rows + 1, rows + 1))
    kkt[:rows, :rows] = p.design @ p.design.T + p.damping * np.eye(rows)
    kkt[rows, p.pinned_index] = 1.0
    kkt[p.pinned_index, rows] = 1.0
    rhs = np.vstack([p.design @ p.target.T, p.pinned_value[None, :]])

    rank_deficient = False
    try:
        sol = sla.solve(kkt, rhs, assume_a="sym")
    except (sla.LinAlgError, np.linalg.LinAlgError):
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        rank_deficient = True

    scale = max(float(np.linalg.norm(rhs)), np.finfo(float).tiny)
    residual = float(np.linalg.norm(kkt @ sol - rhs)) / scale
    return ConstrainedLSSolution(
        delta=np.ascontiguousarray(sol[:rows].T),
        rank_deficient=rank_deficient,
        kkt_residual=residual,
    )


# --------------------------------------------------------------------------- #
# Objectives
# --------------------------------------------------------------------------- #
def step_target(
    w_col: NDArray[np.float64],
    w0_col: NDArray[np.float64],
    x_row: NDArray[np.float64],
    x_fp_row: NDArray[np.float64],
    *,
    use_p1: bool,
    use_p2: bool,
) -> Matrix:
    """Residual that column ``q`` folds into its step (m x k).

    ``[use_p1] w·(x̃_q − x_q) + [use_p2] (w0 − w)·x̃_q``, with ``w`` the column
    before the step. Zero for plain GPTQ.
    """
    target = np.zeros((w_col.size, x_row.size))
    if use_p1:
        target += np.outer(w_col, x_fp_row - x_row)
    if use_p2:
        target += np.outer(w0_col - w_col, x_fp_row)
    return target


def step_objective(delta: Matrix, design: Matrix, target: Matrix, damping: float = 0.0) -> float:
    """``‖Δ·design − target‖² + damping·‖Δ‖²`` by direct evaluation."""
    resid = np.einsum("ij,jk->ik", delta, design) - target
    return float(np.einsum("ij,ij->", resid, resid) + damping * np.einsum("ij,ij->", delta, delta))


def full_objective(
    q_partial: Matrix, w0: Matrix, x: Matrix, x_fp: Matrix, mode: ObjectiveMode = "asym"
) -> float:
    """``‖QX − W0·X‖²`` (sym) or ``‖QX − W0·X̃‖²`` (asym) by direct products."""
    if q_partial.shape != w0.shape or x.shape != x_fp.shape or w0.shape[1] != x.shape[0]:
        raise ShapeError(
            f"inconsistent shapes: Q {q_partial.shape}, W0 {w0.shape}, "
            f"X {x.shape}, X̃ {x_fp.shape}"
        )
    ref = x if mode == "sym" else x_fp
    diff = np.einsum("ij,jk->ik", q_partial, x) - np.einsum("ij,jk->ik", w0, ref)
    return float(np.einsum("ij,ij->", diff, diff))


def precompute_p_rowwise(m: Matrix, factor: LowerTriangular) -> Matrix:
    """Row-by-row ``P[i, i+1:] = M[i, i+1:] · L[i+1:, i+1:] · L[i+1:, i+1:]ᵀ``."""
    lv = factor.values
    n = lv.shape[0]
    if m.shape != (n, n):
        raise ShapeError(f"M {m.shape} does not match L {lv.shape}")
    p = np.zeros((n, n))
    for i in range(n - 1):
        tail = lv[i + 1 :, i + 1 :]
        p[i, i + 1 :] = m[i, i + 1 :] @ tail @ tail.T
    return p


# --------------------------------------------------------------------------- #
# End-to-end reference
# --------------------------------------------------------------------------- #
def greedy_oracle_run(
    problem: LayerProblem, spec: MethodSpec, *, residual: ResidualMode = "column"
) -> Matrix:
    """Quantize column by column, solving every step as a constrained LS problem.

    Scales, act-order and damping follow the engine's conventions; the
    compensation itself never touches L or P.

    ``residual="column"`` folds only column ``q``'s own terms into step ``q``
    (:func:`step_target`, the rule the engine implements). ``residual="full"``
    instead targets the whole layer residual ``W0·X̃ − W·X`` at every step,
    with the real X̃ whatever ``use_p1``/``use_p2`` say; it is a reference for
    the asymmetric objective the method flags approximate.
    """
    if problem.n > ORACLE_MAX_COLUMNS:
        raise OracleSizeError(
            f"oracle is limited to {ORACLE_MAX_COLUMNS} columns, layer has {problem.n}"
        )
    h, damping = build_hessian(problem.x, spec.lambda_frac)
    perm = act_order_permutation(h) if spec.act_order else np.arange(problem.n, dtype=np.int64)
    work = apply_permutation(problem, perm)
    x = work.x
    x_fp = work.x if not spec.use_p1 else work.x_fp

    order = perm if spec.grid.group_order == "original" else None
    grid = QuantGrid.build(
        problem.n,
        bits=spec.grid.bits,
        group_size=spec.grid.group_size,
        clip_grid=spec.grid.clip_grid,
        column_order=order,
    )
    w0 = work.weight.copy()
    w = work.weight.copy()
    if spec.grid.scale_source == "initial":
        grid.fit_all(w0)
    reference = w0 @ work.x_fp

    for q in range(problem.n):
        group = grid.group_of(q)
        if not grid.has_scales(group):
            grid.fit(group, w[:, grid.group_columns(group)])
        w_col = w[:, q].copy()
        quant = grid.quantize(q, w_col)
        if residual == "full":
            target = reference - w @ x
        else:
            target = step_target(
                w_col, w0[:, q], x[q], x_fp[q], use_p1=spec.use_p1, use_p2=spec.use_p2
            )
        sol = solve_constrained_ls(
            ConstrainedLSProblem(
                design=x[q:],
                target=target,
                pinned_value=quant.dequant - w_col,
                damping=damping,
            )
        )
        w[:, q:] += sol.delta
        w[:, q] = quant.dequant
    return restore_columns(w, perm)
