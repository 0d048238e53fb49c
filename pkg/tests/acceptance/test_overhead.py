"""Wall-clock cost of the compensation-aware term on a full-size layer."""

from __future__ import annotations

import time

import pytest

from cae_quant.bundle import gen_synthetic
from cae_quant.engine import run_layer
from cae_quant.methods import get_method

pytestmark = [pytest.mark.timing, pytest.mark.usefixtures("timing_enabled")]


def _best_of(runs: int, method: str) -> float:
    problem = gen_synthetic(0, 1024, 1024, 2048, noise_level=0.05).problem(0)
    spec = get_method(method)
    timings: list[float] = []
    for _ in range(runs):
        t0 = time.perf_counter()
        run_layer(problem, spec, baseline=False)
        timings.append(time.perf_counter() - t0)
    return min(timings)


def test_cae_costs_at_most_half_again() -> None:
    plain = _best_of(3, "gptaq")
    with_cae = _best_of(3, "gptaq_cae")
    assert with_cae <= 1.5 * plain
