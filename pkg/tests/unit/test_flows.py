"""Tests for cae_quant.flows."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest

from cae_quant.calibrator import LayerProblem
from cae_quant.engine import run_layer
from cae_quant.errors import LayerError, ShapeError
from cae_quant.flows import (
    LayerStack,
    activate,
    propagate,
    quantize_stack,
    synthetic_stack,
)
from cae_quant.linalg import relative_diff
from cae_quant.models import MethodSpec
from cae_quant.oracle import greedy_oracle_run

SpecFactory = Callable[..., MethodSpec]


def _stack(seed: int = 0, widths: tuple[int, ...] = (8, 8, 8, 8)) -> LayerStack:
    rng = np.random.default_rng(seed)
    weights = [
        rng.standard_normal((out, inp)) / np.sqrt(inp)
        for inp, out in zip(widths, widths[1:], strict=False)
    ]
    return LayerStack.uniform(weights, "relu")


class TestLayerStack:
    def test_rejects_incompatible_widths(self) -> None:
        with pytest.raises(ShapeError, match="outputs 4 rows"):
            LayerStack.uniform([np.ones((4, 3)), np.ones((2, 5))])

    def test_rejects_empty_stack(self) -> None:
        with pytest.raises(ShapeError):
            LayerStack.uniform([])

    def test_rejects_nonlinearity_count_mismatch(self) -> None:
        with pytest.raises(ShapeError, match="nonlinearities"):
            LayerStack(weights=(np.ones((2, 2)),), nonlinearities=("relu", "relu"))

    def test_depth_and_input_width(self) -> None:
        stack = _stack(widths=(6, 4, 2))
        assert (stack.depth, stack.n_in) == (2, 6)


def test_relu_clamps_negatives() -> None:
    np.testing.assert_array_equal(activate(np.array([[-1.0, 2.0]]), "relu"), [[0.0, 2.0]])


class TestPropagate:
    def test_unquantized_flows_coincide(self) -> None:
        stack = _stack()
        x = np.random.default_rng(1).standard_normal((8, 16))
        trace = propagate(stack, x, list(stack.weights))
        for a, b in zip(trace.quant, trace.fp, strict=True):
            np.testing.assert_array_equal(a, b)
        assert trace.divergence == (0.0,) * 4

    def test_single_identity_layer(self) -> None:
        rng = np.random.default_rng(2)
        w, q = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        x = rng.standard_normal((4, 6))
        stack = LayerStack.uniform([w], "identity")
        trace = propagate(stack, x, [q])
        np.testing.assert_allclose(trace.quant[1], q @ x)
        np.testing.assert_allclose(trace.fp[1], w @ x)
        assert trace.divergence[0] == 0.0

    def test_rejects_wrong_input_width(self) -> None:
        with pytest.raises(ShapeError, match="input rows"):
            propagate(_stack(), np.ones((5, 3)))

    def test_rejects_wrong_replacement_count(self) -> None:
        with pytest.raises(ShapeError, match="quantized layers"):
            propagate(_stack(), np.ones((8, 3)), [None])


class TestQuantizeStack:
    def test_single_layer_matches_run_layer(self, small_spec: SpecFactory) -> None:
        rng = np.random.default_rng(3)
        w, x = rng.standard_normal((6, 8)), rng.standard_normal((8, 32))
        spec = small_spec("gptaq_cae")
        result = quantize_stack(LayerStack.uniform([w], "identity"), x, spec)
        q, report = run_layer(LayerProblem.create(w, x), spec)
        np.testing.assert_array_equal(result.stack.weights[0], q)
        assert result.final.asym_err == report.asym_err

    def test_fp_flow_is_independent_of_method(self, small_spec: SpecFactory) -> None:
        stack = _stack(4)
        x = np.random.default_rng(4).standard_normal((8, 32))
        traces = [
            quantize_stack(stack, x, small_spec(name)).trace
            for name in ("gptq", "gptaq", "gptq_cae", "gptaq_cae")
        ]
        for trace in traces[1:]:
            for a, b in zip(trace.fp, traces[0].fp, strict=True):
                np.testing.assert_array_equal(a, b)

    def test_sixteen_bits_is_near_lossless(self, small_spec: SpecFactory) -> None:
        stack = _stack(5)
        x = np.random.default_rng(5).standard_normal((8, 64))
        for name in ("gptq", "gptaq_cae"):
            result = quantize_stack(stack, x, small_spec(name, bits=16))
            signal_sq = float(np.sum(result.trace.fp[-1] ** 2))
            assert result.trace.divergence[-1] ** 2 <= 1e-6 * signal_sq

    def test_reports_one_per_layer(self, small_spec: SpecFactory) -> None:
        stack = _stack(6)
        x = np.random.default_rng(6).standard_normal((8, 32))
        result = quantize_stack(stack, x, small_spec("gptq"))
        assert [r.layer for r in result.reports] == [0, 1, 2]

    def test_quant_input_perturbs_layer_zero(self, small_spec: SpecFactory) -> None:
        case = synthetic_stack(7, depth=2, width=8, k=32, noise_level=0.1)
        result = quantize_stack(
            case.stack, case.calibration_input, small_spec("gptaq"), quant_input=case.quant_input
        )
        assert result.trace.divergence[0] > 0.0
        assert result.reports[0].sym_err != result.reports[0].asym_err

    def test_custom_quantizer_replaces_the_engine(self, small_spec: SpecFactory) -> None:
        stack = _stack(9)
        x = np.random.default_rng(9).standard_normal((8, 32))
        spec = small_spec("gptaq")
        engine = quantize_stack(stack, x, spec)
        oracle = quantize_stack(stack, x, spec, quantizer=greedy_oracle_run)
        for ours, theirs in zip(engine.stack.weights, oracle.stack.weights, strict=True):
            assert relative_diff(ours, theirs) <= 1e-6
        assert [r.method for r in oracle.reports] == ["gptaq"] * 3
        assert oracle.final.asym_err == pytest.approx(engine.final.asym_err, rel=1e-6)

    def test_engine_failure_names_layer(self, small_spec: SpecFactory) -> None:
        stack = _stack(8, widths=(8, 6, 8))
        x = np.random.default_rng(8).standard_normal((8, 16))
        with pytest.raises(LayerError, match="layer 1") as excinfo:
            quantize_stack(stack, x, small_spec("gptq", group_size=4))
        assert excinfo.value.layer == 1
        assert excinfo.value.exit_code == 3


class TestSyntheticStack:
    def test_same_seed_same_stack(self) -> None:
        a, b = synthetic_stack(17), synthetic_stack(17)
        for wa, wb in zip(a.stack.weights, b.stack.weights, strict=True):
            np.testing.assert_array_equal(wa, wb)
        np.testing.assert_array_equal(a.quant_input, b.quant_input)

    def test_zero_noise_starts_flows_together(self) -> None:
        case = synthetic_stack(1, depth=3, width=4, k=8, noise_level=0.0)
        np.testing.assert_array_equal(case.quant_input, case.calibration_input)
        assert case.stack.depth == 3


def test_quantized_flow_drifts_from_full_precision(small_spec: SpecFactory) -> None:
    case = synthetic_stack(17, depth=3, width=16, k=128, noise_level=0.0)
    result = quantize_stack(case.stack, case.calibration_input, small_spec("gptq", group_size=8))
    divergence = result.trace.divergence
    assert divergence[0] == 0.0
    assert all(d > 0.0 for d in divergence[1:])
    assert result.reports[1].sym_err != result.reports[1].asym_err
