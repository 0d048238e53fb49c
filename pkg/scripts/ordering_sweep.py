"""Sweep seeded layer stacks and tabulate the final-layer error of each method.

Builds ``--seeds`` synthetic stacks (square ReLU layers, weights ``N(0,
1/width)``), quantizes every stack with each registered method and prints the
mean / median final-layer ``asym_err`` plus how often the compensation-aware
variant beats its base. With ``--reference`` it also runs the greedy oracle
against the whole layer residual ``W0·X̃ − W·X`` (layers up to 64 wide). The
acceptance suite pins one point of this sweep; use this script to look at the
others (bit widths, depths, noise levels).

    uv run python scripts/ordering_sweep.py
    uv run python scripts/ordering_sweep.py --bits 2 --depth 8 --noise-level 0.1
    uv run python scripts/ordering_sweep.py --seeds 200 --out sweep.json
    uv run python scripts/ordering_sweep.py --reference
"""

from __future__ import annotations

import argparse
import json
from functools import partial
from pathlib import Path

import numpy as np


def _print_table(columns: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(columns)]
    print(" | ".join(c.ljust(widths[i]) for i, c in enumerate(columns)))
    print("-+-".join("-" * w for w in widths))
    for row in rows:
        print(" | ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))


def main() -> None:
    parser = argparse.ArgumentParser(description="Compare methods on seeded layer stacks")
    parser.add_argument("--seeds", type=int, default=50, help="Number of seeds (default: 50)")
    parser.add_argument("--first-seed", type=int, default=0, help="First seed (default: 0)")
    parser.add_argument("--depth", type=int, default=4, help="Layers per stack (default: 4)")
    parser.add_argument("--width", type=int, default=16, help="Layer width (default: 16)")
    parser.add_argument("--k", type=int, default=128, help="Calibration tokens (default: 128)")
    parser.add_argument("--bits", type=int, default=3, help="Weight bits (default: 3)")
    parser.add_argument("--group-size", type=int, default=8, help="Group size (default: 8)")
    parser.add_argument(
        "--noise-level",
        type=float,
        default=0.05,
        help="Quant-flow input perturbation (default: 0.05)",
    )
    parser.add_argument("--act-order", action="store_true", help="Process columns by act_order")
    parser.add_argument(
        "--reference",
        action="store_true",
        help="Add the full-residual greedy oracle as a reference row",
    )
    parser.add_argument("--out", type=Path, help="Also write per-seed errors as JSON")
    args = parser.parse_args()

    from cae_quant.flows import quantize_stack, synthetic_stack
    from cae_quant.methods import comparison_order, get_method
    from cae_quant.models import GridParams
    from cae_quant.oracle import greedy_oracle_run

    grid = GridParams(bits=args.bits, group_size=args.group_size)
    specs = {
        name: get_method(name).model_copy(update={"grid": grid, "act_order": args.act_order})
        for name in comparison_order()
    }
    errors: dict[str, list[float]] = {name: [] for name in specs}
    full = partial(greedy_oracle_run, residual="full")
    reference = specs["gptaq"].model_copy(update={"name": "full_residual"})
    if args.reference:
        errors[reference.name] = []
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    for seed in seeds:
        case = synthetic_stack(
            seed, depth=args.depth, width=args.width, k=args.k, noise_level=args.noise_level
        )
        for name, spec in specs.items():
            result = quantize_stack(
                case.stack, case.calibration_input, spec, quant_input=case.quant_input
            )
            errors[name].append(result.final.asym_err)
        if args.reference:
            result = quantize_stack(
                case.stack,
                case.calibration_input,
                reference,
                quant_input=case.quant_input,
                quantizer=full,
            )
            errors[reference.name].append(result.final.asym_err)

    arrays = {name: np.asarray(values) for name, values in errors.items()}
    rows = [
        [name, f"{a.mean():.6g}", f"{np.median(a):.6g}", f"{a.min():.6g}", f"{a.max():.6g}"]
        for name, a in arrays.items()
    ]
    _print_table(["method", "mean", "median", "min", "max"], rows)
    print()
    for base in ("gptq", "gptaq"):
        cae = f"{base}_cae"
        wins = int(np.count_nonzero(arrays[cae] < arrays[base]))
        print(f"{cae} beats {base} on {wins}/{len(seeds)} seeds")

    if args.out is not None:
        payload = {"seeds": seeds, "args": {**vars(args), "out": str(args.out)}, "errors": errors}
        args.out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
