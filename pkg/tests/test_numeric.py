import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmask3d.errors import DimMismatch, ZeroNormRow
from xmask3d.numeric import (
    cosine_sim,
    finite_diff_grad,
    relative_error,
    row_normalize,
    softmax_rows,
)


class TestRowNormalize:
    def test_three_four_five(self):
        out = row_normalize(np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_already_unit(self):
        out = row_normalize(np.array([[1.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(out, [[1.0, 0.0, 0.0]])

    def test_random_matches_per_row_division(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(5, 8))
        out = row_normalize(m)
        # independent per-row oracle
        for i in range(5):
            norm = np.sqrt(sum(v * v for v in m[i]))
            np.testing.assert_allclose(out[i], m[i] / norm, rtol=0, atol=1e-15)
            assert abs(np.linalg.norm(out[i]) - 1.0) <= 1e-12

    def test_direction_preserved(self):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(4, 6))
        out = row_normalize(m)
        cos = np.sum(out * m, axis=1) / np.linalg.norm(m, axis=1)
        np.testing.assert_allclose(cos, 1.0, atol=1e-12)

    def test_zero_norm_row_raises_with_index(self):
        m = np.array([[1.0, 2.0], [0.0, 0.0], [3.0, 4.0]])
        with pytest.raises(ZeroNormRow) as exc:
            row_normalize(m)
        assert exc.value.row == 1


class TestCosineSim:
    def test_identical(self):
        assert cosine_sim(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))[0, 0] == 1.0

    def test_orthogonal(self):
        assert cosine_sim(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))[0, 0] == 0.0

    def test_random_matches_dot_loop(self):
        rng = np.random.default_rng(3)
        a = row_normalize(rng.normal(size=(4, 7)))
        b = row_normalize(rng.normal(size=(6, 7)))
        out = cosine_sim(a, b)
        for i in range(4):
            for j in range(6):
                assert abs(out[i, j] - float(np.dot(a[i], b[j]))) < 1e-14
                assert -1 - 1e-9 <= out[i, j] <= 1 + 1e-9

    def test_self_diagonal_is_one(self):
        rng = np.random.default_rng(17)
        for seed in range(20):
            a = row_normalize(np.random.default_rng(seed).normal(size=(5, 9)))
            np.testing.assert_allclose(np.diag(cosine_sim(a, a)), 1.0, atol=1e-9)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            cosine_sim(np.ones((2, 3)), np.ones((2, 4)))


class TestSoftmaxRows:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_closed_form(self):
        e = np.e
        np.testing.assert_allclose(
            softmax_rows(np.array([[1.0, 0.0]])),
            [[e / (e + 1), 1 / (e + 1)]],
            atol=1e-12,
        )

    def test_large_logits_stable(self):
        out = softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        out = softmax_rows(rng.normal(size=(10, 6)) * 30)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
        st.floats(-100, 100),
    )
    def test_shift_invariance(self, logits, c):
        shifted = logits.copy()
        shifted[1] += c
        a = softmax_rows(logits)
        b = softmax_rows(shifted)
        assert np.max(np.abs(a - b)) <= 1e-12

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softmax_rows(np.array([[np.nan, 0.0]]))


class TestFiniteDiffGrad:
    def test_quadratic(self):
        g = finite_diff_grad(lambda m: float(np.sum(m ** 2)), np.array([[3.0]]), eps=1e-4)
        assert abs(g[0, 0] - 6.0) < 1e-6

    def test_linear(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))
        g = finite_diff_grad(lambda m: float(np.sum(m)), x, eps=1e-4)
        np.testing.assert_allclose(g, 1.0, atol=1e-9)

    def test_eps_range_enforced(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda m: 0.0, np.zeros((1, 1)), eps=1e-7)
        with pytest.raises(ValueError):
            finite_diff_grad(lambda m: 0.0, np.zeros((1, 1)), eps=0.5)

    def test_does_not_perturb_input(self):
        x = np.arange(6.0).reshape(2, 3)
        before = x.copy()
        finite_diff_grad(lambda m: float(np.sum(m ** 3)), x)
        np.testing.assert_array_equal(x, before)


def test_relative_error_symmetric_zero():
    a = np.ones((2, 2))
    assert relative_error(a, a) == 0.0
    assert relative_error(a, a * (1 + 1e-6)) < 2e-6
