"""Quant-flow / FP-flow propagation through a stack of linear layers.

Layer ``l`` maps ``X^l`` (n_l x k) to ``F(W_l · X^l)``. The FP flow always
uses the original weights; the quant flow uses each layer's quantized
weights once they exist. Quantizing layer ``l`` therefore sees the quant-flow
activation as ``X`` and the FP-flow activation as ``X̃``.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike

from cae_quant.calibrator import LayerProblem
from cae_quant.engine import DEFAULT_ROW_TILE, alignment_metrics, run_layer
from cae_quant.errors import LayerError, QuantError, ShapeError
from cae_quant.linalg import Matrix, as_matrix, frobenius_sq
from cae_quant.models import LayerReport, MethodSpec

logger = logging.getLogger(__name__)

Nonlinearity = Literal["identity", "relu"]

#: Replaces the engine for one layer: ``(problem, spec) -> Q`` in the problem's column order.
LayerQuantizer = Callable[[LayerProblem, MethodSpec], Matrix]


def activate(values: Matrix, nonlinearity: Nonlinearity) -> Matrix:
    if nonlinearity == "relu":
        out: Matrix = np.maximum(values, 0.0)
        return out
    return values


def apply_layer(weight: Matrix, x: Matrix, nonlinearity: Nonlinearity) -> Matrix:
    """``F(W · X)``."""
    if weight.shape[1] != x.shape[0]:
        raise ShapeError(f"layer expects {weight.shape[1]} input rows, got {x.shape[0]}")
    return activate(weight @ x, nonlinearity)


@dataclass(frozen=True, eq=False)
class LayerStack:
    """Ordered linear layers; ``weights[l]`` maps width ``n_l`` to ``m_l = n_{l+1}``."""

    weights: tuple[Matrix, ...]
    nonlinearities: tuple[Nonlinearity, ...]

    def __post_init__(self) -> None:
        if not self.weights:
            raise ShapeError("a stack needs at least one layer")
        if len(self.nonlinearities) != len(self.weights):
            raise ShapeError(
                f"{len(self.weights)} layers but {len(self.nonlinearities)} nonlinearities"
            )
        for depth, (prev, nxt) in enumerate(zip(self.weights, self.weights[1:], strict=False)):
            if prev.shape[0] != nxt.shape[1]:
                raise ShapeError(
                    f"layer {depth} outputs {prev.shape[0]} rows, layer {depth + 1} "
                    f"expects {nxt.shape[1]}"
                )

    @classmethod
    def uniform(
        cls, weights: Sequence[ArrayLike], nonlinearity: Nonlinearity = "relu"
    ) -> LayerStack:
        """Same nonlinearity after every layer."""
        mats = tuple(as_matrix(w, name=f"W[{i}]") for i, w in enumerate(weights))
        return cls(weights=mats, nonlinearities=(nonlinearity,) * len(mats))

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def n_in(self) -> int:
        return int(self.weights[0].shape[1])

    def with_weights(self, weights: Sequence[Matrix]) -> LayerStack:
        return LayerStack(weights=tuple(weights), nonlinearities=self.nonlinearities)


@dataclass(frozen=True, eq=False)
class FlowTrace:
    """Activations of both flows: ``quant[l]`` / ``fp[l]`` is the input of layer ``l``.

    The last entry of each is the stack output.
    """

    quant: tuple[Matrix, ...]
    fp: tuple[Matrix, ...]

    @property
    def divergence(self) -> tuple[float, ...]:
        """``‖X^l − X̃^l‖_F`` per position."""
        pairs = zip(self.quant, self.fp, strict=True)
        return tuple(float(np.linalg.norm(a - b)) for a, b in pairs)


def propagate(
    stack: LayerStack,
    inputs: ArrayLike,
    quantized: Sequence[Matrix | None] | None = None,
    *,
    quant_input: ArrayLike | None = None,
) -> FlowTrace:
    """Run both flows through ``stack``.

    ``quantized[l]`` replaces layer ``l`` in the quant flow; ``None`` (or no
    list at all) keeps the original weights there. ``quant_input`` starts the
    quant flow from a different layer-0 activation, standing in for upstream
    quantized layers outside the stack.
    """
    x_fp = as_matrix(inputs, name="input")
    x_q = x_fp if quant_input is None else as_matrix(quant_input, name="quant_input")
    if x_fp.shape[0] != stack.n_in or x_q.shape != x_fp.shape:
        raise ShapeError(f"stack expects {stack.n_in} input rows, got {x_fp.shape} / {x_q.shape}")
    replacements: list[Matrix | None] = (
        list(quantized) if quantized is not None else [None] * stack.depth
    )
    if len(replacements) != stack.depth:
        raise ShapeError(f"{len(replacements)} quantized layers for a {stack.depth}-layer stack")

    quant_trace, fp_trace = [x_q], [x_fp]
    for weight, q, act in zip(stack.weights, replacements, stack.nonlinearities, strict=True):
        if q is not None and q.shape != weight.shape:
            raise ShapeError(f"quantized layer {q.shape} does not match {weight.shape}")
        x_fp = apply_layer(weight, x_fp, act)
        x_q = apply_layer(weight if q is None else q, x_q, act)
        fp_trace.append(x_fp)
        quant_trace.append(x_q)
    return FlowTrace(quant=tuple(quant_trace), fp=tuple(fp_trace))


@dataclass(frozen=True, eq=False)
class StackResult:
    stack: LayerStack
    reports: tuple[LayerReport, ...]
    trace: FlowTrace

    @property
    def final(self) -> LayerReport:
        return self.reports[-1]


def quantize_stack(
    stack: LayerStack,
    calibration_input: ArrayLike,
    spec: MethodSpec,
    *,
    quant_input: ArrayLike | None = None,
    workers: int | None = None,
    row_tile: int = DEFAULT_ROW_TILE,
    quantizer: LayerQuantizer | None = None,
) -> StackResult:
    """Quantize every layer in order, feeding each the activations of both flows.

    Layer ``l`` is calibrated with ``X`` = quant-flow activation through the
    already quantized layers and ``X̃`` = FP-flow activation. Engine failures
    are re-raised as :class:`~cae_quant.errors.LayerError`. A ``quantizer``
    takes the engine's place, e.g. an oracle run used as a reference.
    """
    x_fp = as_matrix(calibration_input, name="calibration_input")
    x_q = x_fp if quant_input is None else as_matrix(quant_input, name="quant_input")
    if x_fp.shape[0] != stack.n_in or x_q.shape != x_fp.shape:
        raise ShapeError(f"stack expects {stack.n_in} input rows, got {x_fp.shape} / {x_q.shape}")

    quantized: list[Matrix] = []
    reports: list[LayerReport] = []
    for layer, (weight, act) in enumerate(zip(stack.weights, stack.nonlinearities, strict=True)):
        problem = LayerProblem(weight=weight, x=x_q, x_fp=x_fp)
        try:
            if quantizer is None:
                q, report = run_layer(
                    problem, spec, layer=layer, workers=workers, row_tile=row_tile
                )
            else:
                q = quantizer(problem, spec)
                report = _plain_report(problem, q, spec, layer)
        except QuantError as exc:
            raise LayerError(layer, exc) from exc
        quantized.append(q)
        reports.append(report)
        x_q = apply_layer(q, x_q, act)
        x_fp = apply_layer(weight, x_fp, act)

    result_stack = stack.with_weights(quantized)
    trace = propagate(stack, calibration_input, quantized, quant_input=quant_input)
    logger.info(
        "stack quantized",
        extra={
            "method": spec.name,
            "layers": stack.depth,
            "final_asym_err": reports[-1].asym_err,
            "final_divergence": trace.divergence[-1],
        },
    )
    return StackResult(stack=result_stack, reports=tuple(reports), trace=trace)


def _plain_report(problem: LayerProblem, q: Matrix, spec: MethodSpec, layer: int) -> LayerReport:
    errors = alignment_metrics(q, problem.weight, problem.x, problem.x_fp)
    return LayerReport(
        layer=layer,
        method=spec.name,
        m=problem.m,
        n=problem.n,
        k=problem.k,
        sym_err=errors.sym_err,
        asym_err=errors.asym_err,
        signal_sq=frobenius_sq(problem.weight @ problem.x),
        spec=spec,
    )


@dataclass(frozen=True, eq=False)
class SyntheticStack:
    """A seeded stack with its calibration input and a perturbed quant-flow input."""

    stack: LayerStack
    calibration_input: Matrix
    quant_input: Matrix


def synthetic_stack(
    seed: int,
    *,
    depth: int = 4,
    width: int = 16,
    k: int = 128,
    noise_level: float = 0.05,
    nonlinearity: Nonlinearity = "relu",
) -> SyntheticStack:
    """Square ``width`` x ``width`` layers with weights ``N(0, 1/width)``.

    The calibration input is standard normal; the quant flow starts from it
    plus ``noise_level`` times independent noise. Draw order is the weights
    (layer by layer), the input, then the noise.
    """
    if min(depth, width, k) < 1:
        raise ShapeError(f"depth, width and k must be >= 1, got {depth}, {width}, {k}")
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((width, width)) / np.sqrt(width) for _ in range(depth)]
    x = rng.standard_normal((width, k))
    noise = rng.standard_normal((width, k))
    return SyntheticStack(
        stack=LayerStack.uniform(weights, nonlinearity),
        calibration_input=x,
        quant_input=x + noise_level * noise,
    )
