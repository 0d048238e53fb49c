"""Pydantic v2 schemas for configuration and report boundaries."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

from cae_quant.quantizer import DEFAULT_CLIP_GRID, MAX_BITS, MIN_BITS, normalize_clip_grid

GroupOrder = Literal["permuted", "original"]
ScaleSource = Literal["current", "initial"]
FlushMode = Literal["exact", "entry"]
Command = Literal["run", "compare"]

#: Version of the JSON report layout, emitted as the top-level ``"schema"`` key.
REPORT_SCHEMA = 1


# --------------------------------------------------------------------------- #
# Method configuration
# --------------------------------------------------------------------------- #
class GridParams(BaseModel):
    """Per-group symmetric grid knobs.

    ``group_order`` only matters with act_order: ``permuted`` lays groups over
    the processing order, ``original`` over the layer's own column order.
    ``scale_source="initial"`` fits every group up front from the unmodified
    weights instead of lazily from the compensated ones.
    """

    model_config = ConfigDict(frozen=True)

    bits: int = Field(default=4, ge=MIN_BITS, le=MAX_BITS)
    group_size: int = Field(default=128, gt=0)
    clip_grid: tuple[float, ...] = DEFAULT_CLIP_GRID
    group_order: GroupOrder = "permuted"
    scale_source: ScaleSource = "current"

    @field_validator("clip_grid")
    @classmethod
    def _check_clip_grid(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        # InputError is a ValueError, so pydantic reports it as a ValidationError.
        return normalize_clip_grid(v)


class MethodSpec(BaseModel):
    """One solver configuration.

    The two flags select the variant: neither is GPTQ, ``use_p1`` alone is
    GPTAQ, ``use_p2`` alone is GPTQ+CAE and both is GPTAQ+CAE.
    """

    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    use_p1: bool = False
    use_p2: bool = False
    block_size: int = Field(default=128, ge=1)
    act_order: bool = False
    lambda_frac: float = Field(default=0.01, ge=0.0)
    flush: FlushMode = "exact"
    grid: GridParams = GridParams()

    @property
    def variant(self) -> str:
        base = "gptaq" if self.use_p1 else "gptq"
        return f"{base}_cae" if self.use_p2 else base


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #
class ErrorPair(BaseModel):
    """Output-alignment errors of a quantized layer.

    ``sym_err = ‖QX − W0·X‖²`` and ``asym_err = ‖QX − W0·X̃‖²`` (squared
    Frobenius).
    """

    model_config = ConfigDict(frozen=True)

    sym_err: float = Field(ge=0.0)
    asym_err: float = Field(ge=0.0)


class PhaseTimings(BaseModel):
    model_config = ConfigDict(frozen=True)

    calibrate: float = Field(default=0.0, ge=0.0)
    quantize: float = Field(default=0.0, ge=0.0)
    total: float = Field(default=0.0, ge=0.0)


class LayerReport(BaseModel):
    """Per-layer result of one method. ``rtn`` is absent on the RTN report itself."""

    model_config = ConfigDict(frozen=True)

    layer: int = Field(ge=0)
    method: str
    m: int
    n: int
    k: int
    sym_err: float = Field(ge=0.0)
    asym_err: float = Field(ge=0.0)
    signal_sq: float = Field(ge=0.0)
    rtn: ErrorPair | None = None
    wall_time_ms: PhaseTimings = PhaseTimings()
    state_bytes: int = Field(default=0, ge=0)
    spec: MethodSpec | None = None

    @property
    def errors(self) -> ErrorPair:
        return ErrorPair(sym_err=self.sym_err, asym_err=self.asym_err)


class RunConfig(BaseModel):
    """Flat CLI configuration; field names double as flag names.

    ``methods`` names registry presets. Empty means a single ``custom`` method
    built from the flags below; otherwise each preset contributes only its
    variant flags and shares every other knob from here.
    """

    model_config = ConfigDict(frozen=True)

    use_p1: bool = False
    use_p2: bool = False
    bits: int = Field(default=4, ge=MIN_BITS, le=MAX_BITS)
    group_size: int = Field(default=128, gt=0)
    block_size: int = Field(default=128, ge=1)
    act_order: bool = False
    lambda_frac: float = Field(default=0.01, ge=0.0)
    clip_grid: tuple[float, ...] = DEFAULT_CLIP_GRID
    group_order: GroupOrder = "permuted"
    scale_source: ScaleSource = "current"
    flush: FlushMode = "exact"
    seed: int = 0
    output: Path | None = None
    workers: int | None = Field(default=None, ge=1)
    row_tile: int = Field(default=256, ge=1)
    methods: tuple[str, ...] = ()

    @field_validator("clip_grid")
    @classmethod
    def _check_clip_grid(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        return normalize_clip_grid(v)

    def grid_params(self) -> GridParams:
        return GridParams(
            bits=self.bits,
            group_size=self.group_size,
            clip_grid=self.clip_grid,
            group_order=self.group_order,
            scale_source=self.scale_source,
        )

    def method_spec(
        self, name: str = "custom", *, use_p1: bool | None = None, use_p2: bool | None = None
    ) -> MethodSpec:
        """Build a ``MethodSpec`` from the shared knobs, overriding the variant flags."""
        return MethodSpec(
            name=name,
            use_p1=self.use_p1 if use_p1 is None else use_p1,
            use_p2=self.use_p2 if use_p2 is None else use_p2,
            block_size=self.block_size,
            act_order=self.act_order,
            lambda_frac=self.lambda_frac,
            flush=self.flush,
            grid=self.grid_params(),
        )


class BundleInfo(BaseModel):
    model_config = ConfigDict(frozen=True)

    path: str
    checksum: str
    layers: int


class OrderingEntry(BaseModel):
    """Methods of one layer sorted by ``asym_err``, best first."""

    model_config = ConfigDict(frozen=True)

    layer: int
    methods: list[str]


class RunReport(BaseModel):
    """Top-level ``run`` / ``compare`` report. Dump with ``by_alias=True``."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    schema_version: int = Field(default=REPORT_SCHEMA, alias="schema")
    version: str
    command: Command
    bundle: BundleInfo
    config: RunConfig
    layers: list[LayerReport]
    ordering: list[OrderingEntry] | None = None


class CheckResult(BaseModel):
    """One oracle-check comparison: worst relative difference against its tolerance."""

    model_config = ConfigDict(frozen=True)

    name: str
    instances: int
    max_rel_diff: float
    tolerance: float
    passed: bool


class OracleCheckReport(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    schema_version: int = Field(default=REPORT_SCHEMA, alias="schema")
    version: str
    checks: list[CheckResult]
    passed: bool
