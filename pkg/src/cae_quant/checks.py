"""Seeded engine-versus-oracle comparisons behind ``cae-quant oracle-check``."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator

import numpy as np

from cae_quant.bundle import gen_synthetic
from cae_quant.calibrator import LayerProblem, apply_permutation, calibrate, precompute_p
from cae_quant.engine import (
    EngineState,
    build_grid,
    column_step,
    compute_step,
    naive_run,
    run_layer,
)
from cae_quant.linalg import LowerTriangular, Matrix, relative_diff
from cae_quant.methods import comparison_order, get_method
from cae_quant.models import CheckResult, GridParams, MethodSpec
from cae_quant.oracle import (
    ConstrainedLSProblem,
    greedy_oracle_run,
    precompute_p_rowwise,
    solve_constrained_ls,
    solve_constrained_ls_kkt,
    step_target,
)

logger = logging.getLogger(__name__)

#: Tolerances, relative unless named otherwise.
STEP_TOL = 1e-8
BLOCKED_TOL = 1e-8
P_TOL = 1e-10
GREEDY_TOL = 1e-6
KKT_RESIDUAL_TOL = 1e-9


def small_specs(bits: int = 3, group_size: int = 4) -> list[MethodSpec]:
    """The four registered variants on a coarse grid suited to tiny layers."""
    grid = GridParams(bits=bits, group_size=group_size)
    return [get_method(name).model_copy(update={"grid": grid}) for name in comparison_order()]


def seeded_problems(
    seed: int, count: int, *, max_m: int = 8, max_n: int = 12, max_k: int = 64
) -> Iterator[LayerProblem]:
    """``count`` random layers with dims drawn from ``seed``; n is a multiple of 4."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        m = int(rng.integers(1, max_m + 1))
        n = 4 * int(rng.integers(1, max_n // 4 + 1))
        k = int(rng.integers(n, max_k + 1))
        sub_seed = int(rng.integers(0, 2**31))
        yield gen_synthetic(sub_seed, m, n, k, noise_level=0.1).problem(0)


def step_deltas(
    problem: LayerProblem, spec: MethodSpec
) -> Iterator[tuple[Matrix, ConstrainedLSProblem]]:
    """Walk the reference sweep, yielding each step's engine ΔW with its LS problem."""
    calib = calibrate(problem, spec)
    work = apply_permutation(problem, calib.perm)
    x = work.x
    x_fp = work.x if calib.symmetric else work.x_fp
    grid = build_grid(spec.grid, problem.n, calib.perm)
    state = EngineState.start(work.weight, grid, scale_source=spec.grid.scale_source)
    for q in range(problem.n):
        step = compute_step(state, calib, spec)
        w_col = state.w[:, q]
        target = step_target(
            w_col, state.w0[:, q], x[q], x_fp[q], use_p1=spec.use_p1, use_p2=spec.use_p2
        )
        ls = ConstrainedLSProblem(
            design=x[q:],
            target=target,
            pinned_value=step.quant.dequant - w_col,
            damping=calib.damping,
        )
        yield step.delta, ls
        column_step(state, calib, spec, q)


def _result(name: str, diffs: list[float], tolerance: float) -> CheckResult:
    worst = max(diffs, default=0.0)
    return CheckResult(
        name=name,
        instances=len(diffs),
        max_rel_diff=worst,
        tolerance=tolerance,
        passed=worst <= tolerance,
    )


def check_step_equivalence(problems: list[LayerProblem]) -> list[CheckResult]:
    step_diffs: list[float] = []
    kkt_diffs: list[float] = []
    residuals: list[float] = []
    for problem in problems:
        for spec in small_specs():
            for delta, ls in step_deltas(problem, spec):
                elim = solve_constrained_ls(ls)
                kkt = solve_constrained_ls_kkt(ls)
                step_diffs.append(relative_diff(delta, elim.delta))
                kkt_diffs.append(relative_diff(elim.delta, kkt.delta))
                residuals.append(kkt.kkt_residual or 0.0)
    return [
        _result("step_vs_constrained_ls", step_diffs, STEP_TOL),
        _result("elimination_vs_kkt", kkt_diffs, STEP_TOL),
        _result("kkt_residual", residuals, KKT_RESIDUAL_TOL),
    ]


def check_blocked_vs_naive(problems: list[LayerProblem]) -> CheckResult:
    diffs: list[float] = []
    for problem in problems:
        n = problem.n
        for spec in small_specs():
            reference = naive_run(problem, spec)
            for block in sorted({1, 2, max(1, n // 2), n}):
                blocked = spec.model_copy(update={"block_size": block})
                q, _ = run_layer(problem, blocked, baseline=False, workers=1)
                diffs.append(relative_diff(q, reference))
    return _result("blocked_vs_naive", diffs, BLOCKED_TOL)


def check_p_precompute(seed: int, sizes: tuple[int, ...] = (2, 3, 8, 33, 64)) -> CheckResult:
    rng = np.random.default_rng(seed)
    diffs: list[float] = []
    for n in sizes:
        for _ in range(10):
            m = rng.standard_normal((n, n))
            lv = np.tril(rng.standard_normal((n, n)), k=-1) + np.diag(rng.uniform(0.5, 2.0, n))
            factor = LowerTriangular(lv)
            diffs.append(relative_diff(precompute_p(m, factor), precompute_p_rowwise(m, factor)))
    return _result("p_fast_vs_rowwise", diffs, P_TOL)


def check_greedy_oracle(problems: list[LayerProblem]) -> CheckResult:
    diffs: list[float] = []
    for problem in problems:
        for spec in small_specs():
            q, _ = run_layer(problem, spec, baseline=False, workers=1)
            diffs.append(relative_diff(q, greedy_oracle_run(problem, spec)))
    return _result("run_layer_vs_greedy_oracle", diffs, GREEDY_TOL)


def run_oracle_checks(
    seed: int = 0,
    instances: int = 20,
    progress: Callable[[CheckResult], None] | None = None,
) -> list[CheckResult]:
    """Run every comparison on ``instances`` seeded layers."""
    problems = list(seeded_problems(seed, instances))
    results: list[CheckResult] = []
    for batch in (
        check_step_equivalence(problems),
        [check_blocked_vs_naive(problems)],
        [check_p_precompute(seed)],
        [check_greedy_oracle(problems)],
    ):
        for result in batch:
            logger.info(
                "oracle check",
                extra={
                    "check": result.name,
                    "passed": result.passed,
                    "max_rel_diff": result.max_rel_diff,
                },
            )
            if progress is not None:
                progress(result)
            results.append(result)
    return results
