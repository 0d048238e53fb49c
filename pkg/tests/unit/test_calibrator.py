"""Tests for cae_quant.calibrator."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cae_quant.calibrator import (
    DAMPING_FLOOR,
    LayerProblem,
    act_order_permutation,
    apply_permutation,
    build_hessian,
    calibrate,
    inverse_cholesky,
    precompute_p,
    restore_columns,
)
from cae_quant.errors import CalibrationError, InputError, ShapeError
from cae_quant.linalg import LowerTriangular, relative_diff
from cae_quant.models import MethodSpec
from cae_quant.oracle import precompute_p_rowwise

entries = st.floats(min_value=-100.0, max_value=100.0, allow_subnormal=False)
factor_entries = st.floats(min_value=-2.0, max_value=2.0, allow_subnormal=False)
pivots = st.floats(min_value=0.5, max_value=2.0)


class TestLayerProblem:
    def test_create_defaults_x_fp_to_x(self) -> None:
        p = LayerProblem.create(np.ones((2, 3), dtype=np.float32), np.ones((3, 4)))
        assert p.weight.dtype == np.float64
        assert p.x_fp is p.x
        np.testing.assert_array_equal(p.column_order, [0, 1, 2])
        assert (p.m, p.n, p.k) == (2, 3, 4)

    def test_rejects_mismatched_x(self) -> None:
        with pytest.raises(ShapeError, match="rows"):
            LayerProblem.create(np.ones((2, 3)), np.ones((4, 4)))

    def test_rejects_mismatched_x_fp(self) -> None:
        with pytest.raises(ShapeError):
            LayerProblem.create(np.ones((2, 3)), np.ones((3, 4)), np.ones((3, 5)))

    def test_rejects_non_finite(self) -> None:
        with pytest.raises(InputError):
            LayerProblem.create([[np.inf]], [[1.0]])

    def test_rows_keeps_inputs(self) -> None:
        p = LayerProblem.create(np.arange(6.0).reshape(3, 2), np.eye(2))
        sub = p.rows(1, 3)
        np.testing.assert_array_equal(sub.weight, [[2.0, 3.0], [4.0, 5.0]])
        assert sub.x is p.x


class TestBuildHessian:
    def test_identity_input(self) -> None:
        h, damping = build_hessian(np.eye(4), 0.01)
        np.testing.assert_array_equal(h, np.eye(4))
        assert damping == pytest.approx(0.01)

    def test_zero_input_uses_floor(self) -> None:
        h, damping = build_hessian(np.zeros((3, 5)), 0.01)
        np.testing.assert_array_equal(h, 0.0)
        assert damping == pytest.approx(DAMPING_FLOOR)

    def test_random_input_is_gram_matrix(self) -> None:
        x = np.random.default_rng(1).standard_normal((4, 16))
        h, _ = build_hessian(x, 0.01)
        np.testing.assert_allclose(h, x @ x.T)
        np.testing.assert_array_equal(h, h.T)
        assert np.all(np.linalg.eigvalsh(h) >= -1e-12)

    def test_rejects_negative_fraction(self) -> None:
        with pytest.raises(InputError, match="lambda_frac"):
            build_hessian(np.eye(2), -0.1)


class TestActOrder:
    @pytest.mark.parametrize(
        ("diag", "expected"),
        [
            ([1.0, 5.0, 3.0], [1, 2, 0]),
            ([2.0, 2.0], [0, 1]),
            ([3.0, 3.0, 3.0, 3.0], [0, 1, 2, 3]),
        ],
    )
    def test_descending_diagonal_stable(self, diag: list[float], expected: list[int]) -> None:
        np.testing.assert_array_equal(act_order_permutation(np.diag(diag)), expected)


class TestPermutation:
    def test_identity_is_unchanged(self) -> None:
        p = LayerProblem.create(np.arange(6.0).reshape(2, 3), np.arange(12.0).reshape(3, 4))
        out = apply_permutation(p, [0, 1, 2])
        np.testing.assert_array_equal(out.weight, p.weight)
        np.testing.assert_array_equal(out.x, p.x)

    def test_round_trip_is_bit_exact(
        self, seeded_problem: Callable[..., LayerProblem]
    ) -> None:
        p = seeded_problem(4, 3, 5, 7)
        perm = np.array([2, 0, 4, 1, 3])
        inverse = np.argsort(perm)
        back = apply_permutation(apply_permutation(p, perm), inverse)
        np.testing.assert_array_equal(back.weight, p.weight)
        np.testing.assert_array_equal(back.x_fp, p.x_fp)
        np.testing.assert_array_equal(back.column_order, [0, 1, 2, 3, 4])

    def test_swap_preserves_product(self) -> None:
        rng = np.random.default_rng(0)
        p = LayerProblem.create(rng.standard_normal((3, 2)), rng.standard_normal((2, 6)))
        out = apply_permutation(p, [1, 0])
        np.testing.assert_array_equal(out.weight[:, 0], p.weight[:, 1])
        np.testing.assert_allclose(out.weight @ out.x, p.weight @ p.x, atol=1e-12)

    def test_restore_columns_undoes_permutation(self) -> None:
        p = LayerProblem.create(np.arange(8.0).reshape(2, 4), np.eye(4))
        out = apply_permutation(p, [3, 1, 0, 2])
        np.testing.assert_array_equal(restore_columns(out.weight, out.column_order), p.weight)

    def test_rejects_non_permutation(self) -> None:
        p = LayerProblem.create(np.ones((1, 3)), np.eye(3))
        with pytest.raises(ShapeError):
            apply_permutation(p, [0, 0, 1])


class TestInverseCholesky:
    def test_identity(self) -> None:
        np.testing.assert_allclose(inverse_cholesky(np.eye(3), 0.0).values, np.eye(3))

    def test_singular_diagonal_with_damping(self) -> None:
        l_factor = inverse_cholesky(np.diag([3.0, 0.0]), 1.0)
        np.testing.assert_allclose(l_factor.values, np.diag([0.5, 1.0]))

    def test_random_spd_reconstructs_inverse(self) -> None:
        a = np.random.default_rng(5).standard_normal((8, 8))
        h = a @ a.T
        l_factor = inverse_cholesky(h, 0.1)
        residual = l_factor.gram() @ (h + 0.1 * np.eye(8)) - np.eye(8)
        assert np.max(np.abs(residual)) <= 1e-9 * 8

    def test_trailing_blocks_invert_trailing_hessian(self) -> None:
        a = np.random.default_rng(9).standard_normal((6, 10))
        h = a @ a.T + 0.5 * np.eye(6)
        lv = inverse_cholesky(h, 0.0).values
        for q in range(6):
            tail = lv[q:, q:]
            np.testing.assert_allclose(tail @ tail.T @ h[q:, q:], np.eye(6 - q), atol=1e-9)

    def test_failure_names_original_column(self) -> None:
        h = np.diag([1.0, -5.0, 1.0])
        with pytest.raises(CalibrationError) as excinfo:
            inverse_cholesky(h, 0.0)
        assert excinfo.value.pivot == 1
        assert excinfo.value.exit_code == 4


class TestPrecomputeP:
    def test_zero_m_gives_zero(self) -> None:
        factor = LowerTriangular(np.array([[1.0, 0.0], [0.3, 2.0]]))
        np.testing.assert_array_equal(precompute_p(np.zeros((2, 2)), factor), 0.0)

    def test_two_by_two_hand_expansion(self) -> None:
        a, b, c, d = 1.5, -2.0, 0.7, 3.0
        l11, l21, l22 = 0.9, -0.4, 1.3
        factor = LowerTriangular(np.array([[l11, 0.0], [l21, l22]]))
        out = precompute_p(np.array([[a, b], [c, d]]), factor)
        np.testing.assert_allclose(out, [[0.0, b * l22**2], [0.0, 0.0]])

    def test_fast_path_matches_rowwise_definition(self) -> None:
        rng = np.random.default_rng(11)
        m = rng.standard_normal((16, 16))
        lv = np.tril(rng.standard_normal((16, 16)), k=-1) + np.diag(rng.uniform(0.5, 2.0, 16))
        factor = LowerTriangular(lv)
        fast, slow = precompute_p(m, factor), precompute_p_rowwise(m, factor)
        assert np.linalg.norm(fast - slow) <= 1e-10 * np.linalg.norm(slow)
        np.testing.assert_array_equal(np.tril(fast), 0.0)

    @settings(max_examples=60, deadline=None)
    @given(data=st.data())
    def test_masked_product_equals_rowwise_for_any_input(self, data: st.DataObject) -> None:
        n = data.draw(st.integers(min_value=1, max_value=10))
        m = data.draw(arrays(np.float64, (n, n), elements=entries))
        below = data.draw(arrays(np.float64, (n, n), elements=factor_entries))
        diag = data.draw(arrays(np.float64, n, elements=pivots))
        factor = LowerTriangular(np.tril(below, k=-1) + np.diag(diag))
        fast, slow = precompute_p(m, factor), precompute_p_rowwise(m, factor)
        bound = 1e-10 * float(np.linalg.norm(m)) * float(np.linalg.norm(factor.values)) ** 2
        assert float(np.linalg.norm(fast - slow)) <= bound
        np.testing.assert_array_equal(np.tril(fast), 0.0)


class TestCalibrate:
    def test_gptq_builds_neither_p(self, seeded_problem: Callable[..., LayerProblem]) -> None:
        calib = calibrate(seeded_problem(0, 3, 4, 9), MethodSpec())
        assert calib.p1 is None
        assert calib.p2 is None
        assert calib.symmetric
        np.testing.assert_array_equal(calib.dxxt, 0.0)

    def test_asymmetric_calibration_uses_input_drift(
        self, seeded_problem: Callable[..., LayerProblem]
    ) -> None:
        problem = seeded_problem(0, 3, 4, 9)
        calib = calibrate(problem, MethodSpec(use_p1=True, use_p2=True))
        assert not calib.symmetric
        np.testing.assert_allclose(calib.dxxt, problem.delta_x @ problem.x.T)
        assert calib.p1 is not None
        assert calib.p2 is not None

    def test_p2_matches_explicit_cross_gram(
        self, seeded_problem: Callable[..., LayerProblem]
    ) -> None:
        problem = seeded_problem(5, 4, 12, 40)
        calib = calibrate(problem, MethodSpec(use_p1=True, use_p2=True, act_order=True))
        perm = calib.perm
        cross = (problem.x_fp @ problem.x.T)[np.ix_(perm, perm)]
        assert calib.p2 is not None
        assert relative_diff(calib.p2, precompute_p(cross, calib.factor)) <= 1e-12
        assert relative_diff(calib.p2, precompute_p_rowwise(cross, calib.factor)) <= 1e-12

    @pytest.mark.parametrize("seed", range(4))
    def test_permuting_commutes_with_general_hessian(
        self, seed: int, seeded_problem: Callable[..., LayerProblem]
    ) -> None:
        problem = seeded_problem(seed, 3, 8, 30)
        spec = MethodSpec(use_p1=True, use_p2=True)
        perm = np.random.default_rng(seed).permutation(8)
        direct = calibrate(problem, spec)
        permuted = calibrate(apply_permutation(problem, perm), spec)
        assert np.count_nonzero(direct.hessian - np.diag(np.diag(direct.hessian))) > 0
        np.testing.assert_allclose(
            permuted.hessian, direct.hessian[np.ix_(perm, perm)], rtol=1e-12, atol=1e-12
        )
        np.testing.assert_allclose(
            permuted.dxxt, direct.dxxt[np.ix_(perm, perm)], rtol=1e-12, atol=1e-12
        )
        assert permuted.damping == pytest.approx(direct.damping, rel=1e-12)

    def test_act_order_equals_calibrating_the_sorted_problem(
        self, seeded_problem: Callable[..., LayerProblem]
    ) -> None:
        problem = seeded_problem(9, 3, 8, 30)
        spec = MethodSpec(use_p1=True, use_p2=True)
        ordered = calibrate(problem, spec.model_copy(update={"act_order": True}))
        presorted = calibrate(apply_permutation(problem, ordered.perm), spec)
        for ours, theirs in (
            (ordered.factor.values, presorted.factor.values),
            (ordered.p1, presorted.p1),
            (ordered.p2, presorted.p2),
        ):
            assert ours is not None and theirs is not None
            assert relative_diff(ours, theirs) <= 1e-10

    def test_symmetric_cae_references_quant_flow(
        self, seeded_problem: Callable[..., LayerProblem]
    ) -> None:
        calib = calibrate(seeded_problem(0, 3, 4, 9), MethodSpec(use_p2=True))
        assert calib.p2 is not None
        np.testing.assert_allclose(calib.p2, precompute_p(calib.hessian, calib.factor))

    def test_act_order_permutes_hessian(
        self, seeded_problem: Callable[..., LayerProblem]
    ) -> None:
        problem = seeded_problem(2, 2, 6, 20)
        calib = calibrate(problem, MethodSpec(act_order=True))
        raw = problem.x @ problem.x.T
        np.testing.assert_allclose(calib.hessian, raw[np.ix_(calib.perm, calib.perm)])
        assert np.all(np.diff(np.diag(calib.hessian)) <= 0.0)

    def test_nbytes_counts_built_matrices(
        self, seeded_problem: Callable[..., LayerProblem]
    ) -> None:
        problem = seeded_problem(0, 3, 4, 9)
        plain = calibrate(problem, MethodSpec()).nbytes
        full = calibrate(problem, MethodSpec(use_p1=True, use_p2=True)).nbytes
        assert plain == 3 * 4 * 4 * 8
        assert full == 5 * 4 * 4 * 8
