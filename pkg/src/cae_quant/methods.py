"""Named quantization methods.

Methods are pluggable via a small registry: register a factory under a name
and (usually) add a matching entry to the bundled ``presets.json``. Callers go
through :func:`get_method` and never assemble flag combinations by hand.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Mapping
from pathlib import Path
from typing import Any

from cae_quant.models import GridParams, MethodSpec

#: Bundled method presets, shipped next to this module.
_PRESETS_PATH = Path(__file__).with_name("presets.json")

MethodFactory = Callable[[Mapping[str, Any]], MethodSpec]

_FACTORIES: dict[str, MethodFactory] = {}


def load_presets(path: Path = _PRESETS_PATH) -> dict[str, Any]:
    """Load and parse the bundled (or a supplied) ``presets.json``."""
    data: dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))
    return data


def register_method(name: str, factory: MethodFactory) -> None:
    """Register ``factory`` (built from a ``presets`` mapping) under ``name``."""
    _FACTORIES[name] = factory


def get_method(name: str, presets: Mapping[str, Any] | None = None) -> MethodSpec:
    """Build the method registered as ``name`` from ``presets`` (bundled by default)."""
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise KeyError(f"unknown quantization method: {name!r}") from None
    return factory(presets if presets is not None else load_presets())


def available_methods() -> list[str]:
    """Currently registered method names, in registration order."""
    return list(_FACTORIES)


def comparison_order(presets: Mapping[str, Any] | None = None) -> list[str]:
    """Methods ``compare`` runs when none are named."""
    data = presets if presets is not None else load_presets()
    return [name for name in data["order"] if name in _FACTORIES]


def _preset_factory(name: str) -> MethodFactory:
    def build(presets: Mapping[str, Any]) -> MethodSpec:
        defaults = presets["defaults"]
        entry = presets["methods"][name]
        return MethodSpec(
            name=name,
            use_p1=bool(entry["use_p1"]),
            use_p2=bool(entry["use_p2"]),
            block_size=int(defaults["block_size"]),
            act_order=bool(defaults["act_order"]),
            lambda_frac=float(defaults["lambda_frac"]),
            flush=defaults["flush"],
            grid=GridParams(
                bits=int(defaults["bits"]),
                group_size=int(defaults["group_size"]),
                clip_grid=tuple(float(c) for c in defaults["clip_grid"]),
            ),
        )

    return build


for _name in ("gptq", "gptaq", "gptq_cae", "gptaq_cae"):
    register_method(_name, _preset_factory(_name))
