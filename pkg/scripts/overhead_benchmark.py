"""Time calibration and the column sweep for each method on one synthetic layer.

Prints the per-phase wall time from each method's layer report (best of
``--repeats``) and its ratio to plain GPTQ, plus the calibration state size.
The default shape matches the gated timing check in the acceptance suite.

    uv run python scripts/overhead_benchmark.py
    uv run python scripts/overhead_benchmark.py --m 4096 --n 4096 --k 4096 --workers 8
"""

from __future__ import annotations

import argparse


def main() -> None:
    parser = argparse.ArgumentParser(description="Benchmark per-method quantization cost")
    parser.add_argument("--m", type=int, default=1024, help="Output rows (default: 1024)")
    parser.add_argument("--n", type=int, default=1024, help="Input columns (default: 1024)")
    parser.add_argument("--k", type=int, default=2048, help="Calibration tokens (default: 2048)")
    parser.add_argument("--seed", type=int, default=0, help="Synthetic layer seed (default: 0)")
    parser.add_argument("--repeats", type=int, default=3, help="Runs per method (default: 3)")
    parser.add_argument("--workers", type=int, help="Row workers (default: engine default)")
    args = parser.parse_args()

    from cae_quant.bundle import gen_synthetic
    from cae_quant.engine import run_layer
    from cae_quant.methods import comparison_order, get_method
    from cae_quant.models import LayerReport

    problem = gen_synthetic(args.seed, args.m, args.n, args.k, noise_level=0.05).problem(0)
    best: dict[str, LayerReport] = {}
    for name in comparison_order():
        spec = get_method(name)
        for _ in range(args.repeats):
            _, report = run_layer(problem, spec, baseline=False, workers=args.workers)
            current = best.get(name)
            if current is None or report.wall_time_ms.total < current.wall_time_ms.total:
                best[name] = report

    reference = best["gptq"].wall_time_ms.total
    print(f"layer {args.m}x{args.n}, k={args.k}, best of {args.repeats}")
    print(f"{'method':<10} {'calib ms':>10} {'sweep ms':>10} {'total ms':>10} {'x gptq':>7} MiB")
    for name, report in best.items():
        t = report.wall_time_ms
        print(
            f"{name:<10} {t.calibrate:>10.1f} {t.quantize:>10.1f} {t.total:>10.1f} "
            f"{t.total / reference:>7.2f} {report.state_bytes / 2**20:.1f}"
        )


if __name__ == "__main__":
    main()
