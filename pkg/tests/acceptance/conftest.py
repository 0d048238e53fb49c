"""Fixtures for the seeded acceptance suite.

Everything here is marked ``acceptance``; select it with ``-m acceptance`` or
deselect it with ``-m "not acceptance"``. The wall-clock overhead check needs
a quiet machine, so it also skips unless ``CAE_QUANT_RUN_TIMING=1``.
"""

from __future__ import annotations

import os

import pytest


def pytest_collection_modifyitems(items: list[pytest.Item]) -> None:
    for item in items:
        if "tests/acceptance" in item.nodeid.replace("\\", "/"):
            item.add_marker(pytest.mark.acceptance)


@pytest.fixture(scope="session")
def timing_enabled() -> None:
    """Skip the calling test unless wall-clock checks were asked for."""
    if os.environ.get("CAE_QUANT_RUN_TIMING") != "1":
        pytest.skip("CAE_QUANT_RUN_TIMING not set; timing checks need a quiet machine")
