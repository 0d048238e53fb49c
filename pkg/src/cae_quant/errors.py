"""Exception hierarchy shared by every module and mapped to CLI exit codes.

Each class pairs a stable ``code`` (echoed in logs and the CLI's error line)
with a process ``exit_code``. Classes also derive from the nearest built-in so
callers catching ``ValueError`` / ``ArithmeticError`` keep working.
"""

from __future__ import annotations

from typing import ClassVar


class QuantError(Exception):
    """Base class for every error raised by cae_quant."""

    code: ClassVar[str] = "quant_error"
    exit_code: ClassVar[int] = 1


class ShapeError(QuantError, ValueError):
    """Operand shapes are inconsistent."""

    code = "shape"
    exit_code = 3


class InputError(QuantError, ValueError):
    """Input values violate a precondition (non-finite, not symmetric, ...)."""

    code = "input"
    exit_code = 3


class FactorizationError(QuantError, ArithmeticError):
    """Cholesky failed: the matrix is not positive definite after jitter.

    ``pivot`` is the 0-based index of the leading minor that failed.
    """

    code = "factorization"
    exit_code = 4

    def __init__(self, message: str, *, pivot: int) -> None:
        super().__init__(message)
        self.pivot = pivot


class CalibrationError(QuantError, ArithmeticError):
    """The damped Hessian could not be factorized for a layer."""

    code = "calibration"
    exit_code = 4

    def __init__(self, message: str, *, pivot: int | None = None) -> None:
        super().__init__(message)
        self.pivot = pivot


class PivotError(QuantError, ArithmeticError):
    """A diagonal entry of the inverse-Cholesky factor is too small to divide by."""

    code = "pivot"
    exit_code = 4

    def __init__(self, message: str, *, column: int, value: float) -> None:
        super().__init__(message)
        self.column = column
        self.value = value


class GridStateError(QuantError, RuntimeError):
    """A column was quantized before its group scales were fitted."""

    code = "grid_state"
    exit_code = 5


class OracleSizeError(QuantError, ValueError):
    """The brute-force oracle was asked to solve a layer above its cost guard."""

    code = "oracle_size"
    exit_code = 3


class BundleError(QuantError):
    """Base class for tensor-bundle decode failures."""

    code = "bundle"
    exit_code = 10


class BadMagicError(BundleError):
    code = "bad_magic"
    exit_code = 11


class TruncatedBundleError(BundleError):
    code = "truncated"
    exit_code = 12


class BundleManifestError(BundleError):
    code = "bad_manifest"
    exit_code = 13


class BundleShapeError(BundleError):
    code = "shape_inconsistent"
    exit_code = 14


class LayerError(QuantError):
    """Wraps an engine or calibration failure with the layer it happened in."""

    code = "layer"

    def __init__(self, layer: int, cause: QuantError) -> None:
        super().__init__(f"layer {layer}: [{cause.code}] {cause}")
        self.layer = layer
        self.cause = cause

    @property
    def exit_code(self) -> int:  # type: ignore[override]
        return self.cause.exit_code
