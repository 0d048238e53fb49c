"""Shared pytest fixtures and environment setup.

Pins Powertools' logging knobs before the CLI module is imported and provides
seeded layer problems plus a small-grid method factory used across the unit
and acceptance suites.
"""

from __future__ import annotations

import os
from collections.abc import Callable

import numpy as np
import pytest

# Powertools reads these at Logger() construction; setdefault lets a real
# environment override them.
os.environ.setdefault("POWERTOOLS_SERVICE_NAME", "cae-quant-test")
os.environ.setdefault("POWERTOOLS_LOG_LEVEL", "WARNING")

from cae_quant.bundle import gen_synthetic  # noqa: E402
from cae_quant.calibrator import LayerProblem  # noqa: E402
from cae_quant.methods import get_method  # noqa: E402
from cae_quant.models import GridParams, MethodSpec  # noqa: E402

SpecFactory = Callable[..., MethodSpec]


@pytest.fixture
def seeded_problem() -> Callable[..., LayerProblem]:
    """``make(seed, m, n, k, noise_level=0.1)`` -> a synthetic layer problem."""

    def _make(seed: int, m: int, n: int, k: int, noise_level: float = 0.1) -> LayerProblem:
        return gen_synthetic(seed, m, n, k, noise_level).problem(0)

    return _make


@pytest.fixture
def small_spec() -> SpecFactory:
    """``make(name, bits=3, group_size=4, **overrides)`` -> a registered method on a small grid."""

    def _make(name: str, bits: int = 3, group_size: int = 4, **overrides: object) -> MethodSpec:
        grid = GridParams(bits=bits, group_size=group_size)
        return get_method(name).model_copy(update={"grid": grid, **overrides})

    return _make


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
