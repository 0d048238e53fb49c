"""Tests for cae_quant.models (pydantic configuration and report schemas)."""

from __future__ import annotations

import json

import pytest
from pydantic import ValidationError

from cae_quant.models import (
    BundleInfo,
    GridParams,
    LayerReport,
    MethodSpec,
    RunConfig,
    RunReport,
)


class TestGridParams:
    def test_defaults(self) -> None:
        grid = GridParams()
        assert (grid.bits, grid.group_size) == (4, 128)
        assert grid.group_order == "permuted"
        assert grid.scale_source == "current"

    @pytest.mark.parametrize("bits", [1, 17])
    def test_rejects_bits_out_of_range(self, bits: int) -> None:
        with pytest.raises(ValidationError):
            GridParams(bits=bits)

    def test_rejects_non_positive_group_size(self) -> None:
        with pytest.raises(ValidationError):
            GridParams(group_size=0)

    def test_clip_grid_normalized(self) -> None:
        assert GridParams(clip_grid=(0.8, 1.0, 0.8)).clip_grid == (1.0, 0.8)

    def test_clip_grid_without_unit_ratio_rejected(self) -> None:
        with pytest.raises(ValidationError, match="1.0"):
            GridParams(clip_grid=(0.9, 0.8))

    def test_frozen(self) -> None:
        grid = GridParams()
        with pytest.raises(ValidationError):
            grid.bits = 3  # type: ignore[misc]


class TestMethodSpec:
    @pytest.mark.parametrize(
        ("use_p1", "use_p2", "variant"),
        [
            (False, False, "gptq"),
            (True, False, "gptaq"),
            (False, True, "gptq_cae"),
            (True, True, "gptaq_cae"),
        ],
    )
    def test_variant(self, use_p1: bool, use_p2: bool, variant: str) -> None:
        assert MethodSpec(use_p1=use_p1, use_p2=use_p2).variant == variant

    def test_rejects_zero_block(self) -> None:
        with pytest.raises(ValidationError):
            MethodSpec(block_size=0)

    def test_rejects_negative_damping(self) -> None:
        with pytest.raises(ValidationError):
            MethodSpec(lambda_frac=-0.1)

    def test_rejects_unknown_flush_mode(self) -> None:
        with pytest.raises(ValidationError):
            MethodSpec(flush="lazy")  # type: ignore[arg-type]


class TestRunConfig:
    def test_method_spec_carries_shared_knobs(self) -> None:
        config = RunConfig(bits=3, group_size=8, block_size=4, act_order=True, use_p2=True)
        spec = config.method_spec()
        assert spec.name == "custom"
        assert (spec.use_p1, spec.use_p2) == (False, True)
        assert (spec.grid.bits, spec.grid.group_size, spec.block_size) == (3, 8, 4)
        assert spec.act_order

    def test_method_spec_overrides_variant(self) -> None:
        spec = RunConfig(use_p1=True).method_spec("gptq", use_p1=False, use_p2=False)
        assert (spec.name, spec.use_p1, spec.use_p2) == ("gptq", False, False)

    def test_rejects_zero_workers(self) -> None:
        with pytest.raises(ValidationError):
            RunConfig(workers=0)


def test_run_report_dumps_schema_key() -> None:
    report = RunReport(
        version="0.1.0",
        command="run",
        bundle=BundleInfo(path="layer.qb", checksum="ab" * 32, layers=1),
        config=RunConfig(),
        layers=[
            LayerReport(
                layer=0, method="gptq", m=2, n=4, k=8, sym_err=1.0, asym_err=2.0, signal_sq=10.0
            )
        ],
    )
    payload = json.loads(report.model_dump_json(by_alias=True))
    assert payload["schema"] == 1
    assert "schema_version" not in payload
    timings = payload["layers"][0]["wall_time_ms"]
    assert timings == {"calibrate": 0.0, "quantize": 0.0, "total": 0.0}
    assert payload["ordering"] is None
    assert RunReport.model_validate(payload) == report
