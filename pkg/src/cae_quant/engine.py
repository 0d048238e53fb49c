"""Column-wise quantization with second-order compensation.

One state machine covers the four methods through two flags on
:class:`~cae_quant.models.MethodSpec`:

    use_p1  use_p2
    off     off     GPTQ
    on      off     GPTAQ
    off     on      GPTQ+CAE
    on      on      GPTAQ+CAE

For column ``q`` with pre-step value ``w = W[:, q]``, quantized value ``ŵ`` and
``e = (w − ŵ) / L[q, q]``, every row receives, over columns ``q:``::

    ΔW = −e·L[q:, q]ᵀ + [use_p1] w·P1[q, q:] + [use_p2] (W0[:, q] − w)·P2[q, q:]

:func:`column_step` applies it one column at a time (the reference path).
:func:`run_layer` applies the same updates lazily: immediately inside a block
of ``block_size`` columns and as one matrix product for the trailing columns
when the block closes. Rows never interact, so the layer is cut into fixed
row tiles that run on a thread pool. Tile boundaries do not depend on the
worker count, so the output is bit-identical for any number of workers.
"""

from __future__ import annotations

import logging
import os
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from functools import partial

import numpy as np
from numpy.typing import NDArray

from cae_quant.calibrator import (
    CalibState,
    LayerProblem,
    Permutation,
    apply_permutation,
    calibrate,
    restore_columns,
)
from cae_quant.errors import InputError, PivotError, ShapeError
from cae_quant.linalg import Matrix, frobenius_sq, matmul
from cae_quant.models import (
    ErrorPair,
    GridParams,
    LayerReport,
    MethodSpec,
    PhaseTimings,
    ScaleSource,
)
from cae_quant.quantizer import QuantGrid, QuantizedColumn

logger = logging.getLogger(__name__)

#: Smallest |L[q, q]| the step divides by.
PIVOT_EPS = 1e-12

#: Rows per independently processed tile.
DEFAULT_ROW_TILE = 256

Pending = Callable[[NDArray[np.int64]], Matrix]


def build_grid(params: GridParams, n: int, perm: Permutation | None = None) -> QuantGrid:
    """Grid over ``n`` processing-order columns.

    ``perm`` (processing position -> layer column) is honoured only when
    groups follow the layer's own column order.
    """
    order = perm if params.group_order == "original" else None
    return QuantGrid.build(
        n,
        bits=params.bits,
        group_size=params.group_size,
        clip_grid=params.clip_grid,
        column_order=order,
    )


# --------------------------------------------------------------------------- #
# State and the reference column step
# --------------------------------------------------------------------------- #
@dataclass(eq=False)
class EngineState:
    """Evolving weights of one row range.

    ``w0`` is the frozen snapshot, ``w`` the compensated weights and
    ``quantized`` the output; columns before ``col`` are final in both ``w``
    and ``quantized`` and never read again.
    """

    w0: Matrix
    w: Matrix
    quantized: Matrix
    grid: QuantGrid
    col: int = 0

    @classmethod
    def start(
        cls, weight: Matrix, grid: QuantGrid, *, scale_source: ScaleSource = "current"
    ) -> EngineState:
        n = grid.group_ids.size
        if weight.shape[1] != n:
            raise ShapeError(f"grid covers {n} columns, W has {weight.shape[1]}")
        state = cls(
            w0=weight.copy(), w=weight.copy(), quantized=np.zeros_like(weight), grid=grid
        )
        if scale_source == "initial":
            grid.fit_all(state.w0)
        return state


@dataclass(frozen=True, eq=False)
class StepResult:
    """Outcome of quantizing one column: its grid values and ΔW over columns ``col:``."""

    col: int
    quant: QuantizedColumn
    delta: Matrix


def _pivot(calib: CalibState, col: int) -> float:
    lqq = float(calib.factor.values[col, col])
    if abs(lqq) < PIVOT_EPS:
        raise PivotError(
            f"column {col}: |L[q, q]| = {abs(lqq):.3e} is below {PIVOT_EPS:g}; raise damping",
            column=col,
            value=lqq,
        )
    return lqq


def _ensure_scales(state: EngineState, col: int, pending: Pending | None = None) -> None:
    """Fit the group of ``col`` from the current weights if it has no scales yet.

    ``pending`` returns the not-yet-flushed updates for columns beyond the
    current block, so a group straddling a block edge is fitted from the same
    values the column-by-column path would see.
    """
    grid = state.grid
    group = grid.group_of(col)
    if grid.has_scales(group):
        return
    cols = grid.group_columns(group)
    values = state.w[:, cols]
    if pending is not None:
        values = values + pending(cols)
    grid.fit(group, values)


def column_update(
    calib: CalibState,
    spec: MethodSpec,
    col: int,
    err: NDArray[np.float64],
    w_col: NDArray[np.float64],
    w0_col: NDArray[np.float64],
    stop: int | None = None,
) -> Matrix:
    """ΔW contributed by column ``col`` to columns ``col:stop``."""
    span = slice(col, stop)
    delta = -np.outer(err, calib.factor.values[span, col])
    if spec.use_p1 and calib.p1 is not None:
        delta += np.outer(w_col, calib.p1[col, span])
    if spec.use_p2 and calib.p2 is not None:
        delta += np.outer(w0_col - w_col, calib.p2[col, span])
    return delta


def compute_step(state: EngineState, calib: CalibState, spec: MethodSpec) -> StepResult:
    """Quantize column ``state.col`` and return the update without applying it."""
    col = state.col
    _ensure_scales(state, col)
    w_col = state.w[:, col].copy()
    quant = state.grid.quantize(col, w_col)
    err = (w_col - quant.dequant) / _pivot(calib, col)
    delta = column_update(calib, spec, col, err, w_col, state.w0[:, col])
    return StepResult(col=col, quant=quant, delta=delta)


def column_step(state: EngineState, calib: CalibState, spec: MethodSpec, col: int) -> EngineState:
    """Quantize column ``col``, compensate columns ``col:`` and advance the state."""
    if col != state.col:
        raise InputError(f"column_step expects column {state.col}, got {col}")
    step = compute_step(state, calib, spec)
    state.w[:, col:] += step.delta
    state.w[:, col] = step.quant.dequant
    state.quantized[:, col] = step.quant.dequant
    state.col += 1
    return state


def naive_run(problem: LayerProblem, spec: MethodSpec, calib: CalibState | None = None) -> Matrix:
    """Unblocked reference: ``column_step`` for every column over all rows at once."""
    calib = calib if calib is not None else calibrate(problem, spec)
    work = apply_permutation(problem, calib.perm)
    grid = build_grid(spec.grid, problem.n, calib.perm)
    state = EngineState.start(work.weight, grid, scale_source=spec.grid.scale_source)
    for col in range(problem.n):
        column_step(state, calib, spec, col)
    return restore_columns(state.quantized, calib.perm)


# --------------------------------------------------------------------------- #
# Blocked path
# --------------------------------------------------------------------------- #
@dataclass(eq=False)
class _Block:
    """Deferred updates of one block: scaled errors and the weight references of each column."""

    start: int
    stop: int
    err: Matrix
    w_ref: Matrix
    drift: Matrix

    @classmethod
    def open(cls, start: int, stop: int, rows: int) -> _Block:
        width = stop - start
        return cls(
            start=start,
            stop=stop,
            err=np.zeros((rows, width)),
            w_ref=np.zeros((rows, width)),
            drift=np.zeros((rows, width)),
        )

    def updates(
        self,
        lv: Matrix,
        p1: Matrix | None,
        p2: Matrix | None,
        cols: NDArray[np.int64] | slice,
        done: int,
    ) -> Matrix:
        """Sum of the first ``done`` block columns' contributions to ``cols``."""
        used = slice(self.start, self.start + done)
        upd: Matrix = -self.err[:, :done] @ lv[cols, used].T
        if p1 is not None:
            upd += self.w_ref[:, :done] @ p1[used, cols]
        if p2 is not None:
            upd += self.drift[:, :done] @ p2[used, cols]
        return upd


def _pending(
    block: _Block,
    lv: Matrix,
    p1: Matrix | None,
    p2: Matrix | None,
    cols: NDArray[np.int64],
    *,
    done: int,
) -> Matrix:
    out = np.zeros((block.err.shape[0], cols.size))
    beyond = cols >= block.stop
    if done and beyond.any():
        out[:, beyond] = block.updates(lv, p1, p2, cols[beyond], done)
    return out


def _quantize_tile(weight: Matrix, calib: CalibState, spec: MethodSpec) -> Matrix:
    """Blocked column sweep over one row tile (processing order in and out)."""
    m, n = weight.shape
    grid = build_grid(spec.grid, n, calib.perm)
    state = EngineState.start(weight, grid, scale_source=spec.grid.scale_source)
    w, w0 = state.w, state.w0
    lv = calib.factor.values
    p1 = calib.p1 if spec.use_p1 else None
    p2 = calib.p2 if spec.use_p2 else None

    for start in range(0, n, spec.block_size):
        stop = min(start + spec.block_size, n)
        block = _Block.open(start, stop, m)
        entry = w[:, start:stop].copy() if spec.flush == "entry" else None

        for a in range(stop - start):
            col = start + a
            _ensure_scales(state, col, partial(_pending, block, lv, p1, p2, done=a))
            w_col = w[:, col].copy()
            quant = grid.quantize(col, w_col)
            e = (w_col - quant.dequant) / _pivot(calib, col)
            ref = entry[:, a] if entry is not None else w_col
            block.err[:, a] = e
            block.w_ref[:, a] = ref
            block.drift[:, a] = w0[:, col] - ref

            w[:, col:stop] += column_update(calib, spec, col, e, w_col, w0[:, col], stop)
            w[:, col] = quant.dequant
            state.quantized[:, col] = quant.dequant

        if stop < n:
            w[:, stop:] += block.updates(lv, p1, p2, slice(stop, None), stop - start)
        logger.debug("block flushed", extra={"start": start, "stop": stop, "rows": m})
    return state.quantized


def quantize_rows(
    weight: Matrix,
    calib: CalibState,
    spec: MethodSpec,
    *,
    workers: int | None = None,
    row_tile: int = DEFAULT_ROW_TILE,
    progress: Callable[[int, int], None] | None = None,
) -> Matrix:
    """Run the blocked sweep over fixed row tiles on a bounded thread pool.

    ``weight`` is in processing order; so is the result. ``progress(done,
    total)`` is invoked as each tile completes, when provided.
    """
    if row_tile < 1:
        raise InputError(f"row_tile must be >= 1, got {row_tile}")
    m = weight.shape[0]
    tiles = [(r, min(r + row_tile, m)) for r in range(0, m, row_tile)]
    out = np.empty_like(weight)
    max_workers = max(1, min(workers or os.cpu_count() or 1, len(tiles)))

    def _one(tile: tuple[int, int]) -> tuple[tuple[int, int], Matrix]:
        lo, hi = tile
        return tile, _quantize_tile(weight[lo:hi], calib, spec)

    done = 0
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        for future in as_completed([executor.submit(_one, tile) for tile in tiles]):
            (lo, hi), q_tile = future.result()
            out[lo:hi] = q_tile
            done += 1
            if progress is not None:
                progress(done, len(tiles))
    return out


# --------------------------------------------------------------------------- #
# Layer runs and metrics
# --------------------------------------------------------------------------- #
def alignment_metrics(q: Matrix, w0: Matrix, x: Matrix, x_fp: Matrix) -> ErrorPair:
    """``sym_err = ‖QX − W0·X‖²`` and ``asym_err = ‖QX − W0·X̃‖²``."""
    if q.shape != w0.shape:
        raise ShapeError(f"Q {q.shape} and W0 {w0.shape} differ")
    if x.shape != x_fp.shape:
        raise ShapeError(f"X {x.shape} and X̃ {x_fp.shape} differ")
    out = matmul(q, x)
    return ErrorPair(
        sym_err=frobenius_sq(out - matmul(w0, x)),
        asym_err=frobenius_sq(out - matmul(w0, x_fp)),
    )


def rtn_baseline(
    problem: LayerProblem, grid: GridParams, *, layer: int = 0
) -> tuple[Matrix, LayerReport]:
    """Round every column to its group grid with no compensation."""
    t0 = time.perf_counter()
    qgrid = build_grid(grid, problem.n)
    qgrid.fit_all(problem.weight)
    q = qgrid.quantize_matrix(problem.weight)
    elapsed = (time.perf_counter() - t0) * 1e3
    errors = alignment_metrics(q, problem.weight, problem.x, problem.x_fp)
    report = LayerReport(
        layer=layer,
        method="rtn",
        m=problem.m,
        n=problem.n,
        k=problem.k,
        sym_err=errors.sym_err,
        asym_err=errors.asym_err,
        signal_sq=frobenius_sq(matmul(problem.weight, problem.x)),
        wall_time_ms=PhaseTimings(quantize=elapsed, total=elapsed),
    )
    return q, report


def run_layer(
    problem: LayerProblem,
    spec: MethodSpec,
    *,
    layer: int = 0,
    workers: int | None = None,
    row_tile: int = DEFAULT_ROW_TILE,
    baseline: bool = True,
) -> tuple[Matrix, LayerReport]:
    """Calibrate, sweep every column in blocks and report the alignment errors.

    Q comes back in the problem's own column order. With ``baseline`` the
    report also carries the round-to-nearest errors.
    """
    t0 = time.perf_counter()
    calib = calibrate(problem, spec)
    t1 = time.perf_counter()
    work = apply_permutation(problem, calib.perm)
    q_perm = quantize_rows(work.weight, calib, spec, workers=workers, row_tile=row_tile)
    q = restore_columns(q_perm, calib.perm)
    t2 = time.perf_counter()

    errors = alignment_metrics(q, problem.weight, problem.x, problem.x_fp)
    rtn = rtn_baseline(problem, spec.grid, layer=layer)[1].errors if baseline else None
    report = LayerReport(
        layer=layer,
        method=spec.name,
        m=problem.m,
        n=problem.n,
        k=problem.k,
        sym_err=errors.sym_err,
        asym_err=errors.asym_err,
        signal_sq=frobenius_sq(matmul(problem.weight, problem.x)),
        rtn=rtn,
        wall_time_ms=PhaseTimings(
            calibrate=(t1 - t0) * 1e3, quantize=(t2 - t1) * 1e3, total=(t2 - t0) * 1e3
        ),
        state_bytes=calib.nbytes + int(problem.weight.nbytes),
        spec=spec,
    )
    logger.info(
        "layer quantized",
        extra={
            "layer": layer,
            "method": spec.name,
            "sym_err": report.sym_err,
            "asym_err": report.asym_err,
            "wall_time_ms": report.wall_time_ms.total,
        },
    )
    return q, report
