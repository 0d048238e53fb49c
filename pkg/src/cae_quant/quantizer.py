"""Per-group symmetric weight grid: MSE clip search and round-to-nearest.

The grid is strictly symmetric: ``qmax = 2**(bits-1) - 1`` and the level
``-2**(bits-1)`` is never used. Rounding is half-away-from-zero so that
``quantize(-w) == -quantize(w)`` holds exactly. A scale of 0 marks an
all-zero group; every value in it quantizes to level 0.

Scales are fitted once per (row, group) and frozen; ``QuantGrid`` holds them
for one row tile. Fitting and quantizing are pure per-row operations, so row
tiles never share a grid.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from cae_quant.errors import GridStateError, InputError, ShapeError
from cae_quant.linalg import Matrix

#: Clip ratios searched by default (the source gives no grid).
DEFAULT_CLIP_GRID: tuple[float, ...] = (1.00, 0.95, 0.90, 0.85, 0.80)

MIN_BITS = 2
MAX_BITS = 16


def qmax_for(bits: int) -> int:
    """Largest level magnitude of a ``bits``-wide symmetric grid."""
    if bits < MIN_BITS:
        raise InputError(f"bits must be >= {MIN_BITS}, got {bits}")
    return int(2 ** (bits - 1) - 1)


def round_half_away(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Round to nearest, ties away from zero (numpy's ``round`` is half-to-even)."""
    rounded: NDArray[np.float64] = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return rounded


def normalize_clip_grid(clip_grid: Sequence[float]) -> tuple[float, ...]:
    """Validate a clip grid and return it de-duplicated, largest ratio first."""
    ratios = tuple(sorted({float(c) for c in clip_grid}, reverse=True))
    if not ratios:
        raise InputError("clip grid must not be empty")
    if any(not 0.0 < c <= 1.0 for c in ratios):
        raise InputError(f"clip ratios must lie in (0, 1], got {ratios}")
    if ratios[0] != 1.0:
        raise InputError("clip grid must contain 1.0")
    return ratios


@dataclass(frozen=True)
class QuantizedColumn:
    """Integer levels and their dequantized values for one weight column."""

    levels: NDArray[np.int64]
    dequant: NDArray[np.float64]


def quantize_values(
    values: NDArray[np.float64], scales: NDArray[np.float64], qmax: int
) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Quantize ``values`` against per-row ``scales`` (broadcast along the last axis).

    ``values`` is either a column (shape ``(m,)``) or a row-group slice
    (shape ``(m, g)``); ``scales`` has shape ``(m,)``.
    """
    s = scales if values.ndim == 1 else scales[:, None]
    safe = np.where(s > 0.0, s, 1.0)
    levels = np.clip(round_half_away(values / safe), -qmax, qmax)
    levels = np.where(s > 0.0, levels, 0.0)
    return levels.astype(np.int64), levels * s


def fit_group_scales(
    group_weights: Matrix, bits: int, clip_grid: Sequence[float] = DEFAULT_CLIP_GRID
) -> NDArray[np.float64]:
    """Per-row scale minimizing the group's squared round-trip error.

    For each ratio ``c`` the candidate is ``c * max|w_row| / qmax``. The search
    walks ratios from largest to smallest and only moves on a strictly lower
    error, so ties go to the larger ratio. All-zero rows get scale 0.
    """
    if group_weights.ndim != 2 or group_weights.shape[1] == 0:
        raise ShapeError(f"group slice must be a non-empty 2-D array, got {group_weights.shape}")
    qmax = qmax_for(bits)
    ratios = normalize_clip_grid(clip_grid)
    amax = np.max(np.abs(group_weights), axis=1)

    best_scale = np.zeros_like(amax)
    best_err = np.full_like(amax, np.inf)
    for c in ratios:
        scale = c * amax / qmax
        _, dequant = quantize_values(group_weights, scale, qmax)
        err = np.sum((group_weights - dequant) ** 2, axis=1)
        better = err < best_err
        best_scale = np.where(better, scale, best_scale)
        best_err = np.where(better, err, best_err)
    best_scale[amax == 0.0] = 0.0
    return best_scale


def quantize_column(
    col: NDArray[np.float64], scales: NDArray[np.float64], bits: int
) -> QuantizedColumn:
    """``levels = clamp(round(col / scale), ±qmax)``, ``dequant = levels * scale``."""
    if col.shape != scales.shape:
        raise ShapeError(f"column {col.shape} and scales {scales.shape} differ")
    levels, dequant = quantize_values(col, scales, qmax_for(bits))
    return QuantizedColumn(levels=levels, dequant=dequant)


@dataclass
class QuantGrid:
    """Group layout plus lazily fitted per-(row, group) scales for one row tile.

    ``group_ids[j]`` is the group of (processing-order) column ``j``. With the
    default layout groups are contiguous runs of ``group_size`` columns; when
    act_order groups over the original order, ``group_ids`` follows the
    permutation instead.
    """

    bits: int
    group_size: int
    group_ids: NDArray[np.int64]
    clip_grid: tuple[float, ...] = DEFAULT_CLIP_GRID
    scales: dict[int, NDArray[np.float64]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise InputError(f"bits must lie in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if self.group_size <= 0:
            raise InputError(f"group_size must be positive, got {self.group_size}")
        self.clip_grid = normalize_clip_grid(self.clip_grid)

    @classmethod
    def build(
        cls,
        n_cols: int,
        *,
        bits: int,
        group_size: int,
        clip_grid: Sequence[float] = DEFAULT_CLIP_GRID,
        column_order: NDArray[np.int64] | None = None,
    ) -> QuantGrid:
        """Lay groups over ``n_cols`` columns.

        A ``group_size`` at or above ``n_cols`` means one group per row
        (per-channel). Otherwise it must divide ``n_cols``. ``column_order``
        maps processing position to original column; passing it groups over
        the original order.
        """
        size = min(group_size, n_cols)
        if size <= 0 or n_cols % size:
            raise ShapeError(f"group_size {group_size} does not divide {n_cols} columns")
        positions = np.arange(n_cols) if column_order is None else np.asarray(column_order)
        return cls(
            bits=bits,
            group_size=size,
            group_ids=(positions // size).astype(np.int64),
            clip_grid=tuple(clip_grid),
        )

    @property
    def qmax(self) -> int:
        return qmax_for(self.bits)

    @property
    def n_groups(self) -> int:
        return int(self.group_ids.max()) + 1 if self.group_ids.size else 0

    def group_of(self, col: int) -> int:
        return int(self.group_ids[col])

    def group_columns(self, group: int) -> NDArray[np.int64]:
        """Processing-order columns belonging to ``group``, ascending."""
        return np.flatnonzero(self.group_ids == group)

    def has_scales(self, group: int) -> bool:
        return group in self.scales

    def fit(self, group: int, group_weights: Matrix) -> NDArray[np.float64]:
        """Fit and freeze the scales of ``group`` from its (m, g) weight slice."""
        scales = fit_group_scales(group_weights, self.bits, self.clip_grid)
        self.scales[group] = scales
        return scales

    def fit_all(self, weights: Matrix) -> None:
        """Fit every group up front from ``weights`` (static groups)."""
        for group in range(self.n_groups):
            self.fit(group, weights[:, self.group_columns(group)])

    def quantize(self, col: int, values: NDArray[np.float64]) -> QuantizedColumn:
        group = self.group_of(col)
        try:
            scales = self.scales[group]
        except KeyError:
            raise GridStateError(f"column {col}: scales for group {group} not fitted") from None
        return quantize_column(values, scales, self.bits)

    def quantize_matrix(self, weights: Matrix) -> Matrix:
        """Round-to-nearest every column of ``weights`` with already fitted scales."""
        out = np.empty_like(weights)
        for col in range(weights.shape[1]):
            out[:, col] = self.quantize(col, weights[:, col]).dequant
        return out
