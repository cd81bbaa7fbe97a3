import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cycas import diffmath as dm
from cycas.loss import LossConfig, cycle_matrix, loss_symmetric


def test_matmul_examples():
    eye = dm.constant(np.eye(2))
    swap = dm.constant([[0, 1], [1, 0]])
    a = dm.constant([[1, 2], [3, 4]])
    assert np.array_equal(dm.matmul(eye, eye).value, np.eye(2))
    assert np.array_equal(dm.matmul(swap, swap).value, np.eye(2))
    assert np.array_equal(dm.matmul(a, eye).value, a.value)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dm.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dm.matmul(dm.constant(np.ones((2, 3))), dm.constant(np.ones((2, 3))))


def test_transpose():
    assert np.array_equal(dm.transpose(dm.constant([[1, 2], [3, 4]])).value, [[1, 3], [2, 4]])


def test_l2_normalize_columns():
    out = dm.l2_normalize_columns(dm.constant([[3.0], [4.0]])).value
    assert np.allclose(out, [[0.6], [0.8]])
    unit = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(dm.l2_normalize_columns(dm.constant(unit)).value, unit)


def test_row_softmax_examples():
    out = dm.row_softmax(dm.constant([[1.0, 0.5]]), 2.0).value
    assert np.allclose(out, [[0.7311, 0.2689]], atol=1e-4)
    flat = dm.row_softmax(dm.constant(np.full((2, 5), 0.3)), 7.0).value
    assert np.allclose(flat, 0.2)
    sharp = dm.row_softmax(dm.constant([[1.0, 0.5]]), 100.0).value
    assert sharp[0, 0] > 1 - 1e-12 and sharp[0, 1] < 1e-12


def test_row_softmax_rejects_bad_temperature():
    with pytest.raises(dm.ParameterError):
        dm.row_softmax(dm.constant([[1.0]]), 0.0)


def test_hinge():
    assert dm.hinge(dm.constant([[-0.3]])).item() == 0.0
    assert dm.hinge(dm.constant([[0.4]])).item() == pytest.approx(0.4)


def test_row_col_max_excluding_diag():
    r, c = dm.row_col_max_excluding_diag(dm.constant(np.eye(2)))
    assert np.array_equal(r.value.ravel(), [0, 0]) and np.array_equal(c.value.ravel(), [0, 0])
    r, c = dm.row_col_max_excluding_diag(dm.constant([[0.6, 0.5], [0.1, 0.9]]))
    assert np.allclose(r.value.ravel(), [0.5, 0.1])
    assert np.allclose(c.value.ravel(), [0.1, 0.5])
    with pytest.raises(dm.DegenerateInputError):
        dm.row_col_max_excluding_diag(dm.constant([[1.0]]))


def test_sum_gradient_is_ones():
    x = dm.leaf(np.random.default_rng(0).standard_normal((3, 3)))
    dm.backward(dm.sum_all(x))
    assert np.array_equal(x.grad, np.ones((3, 3)))


def test_backward_rejects_non_scalar():
    with pytest.raises(dm.DimensionError):
        dm.backward(dm.leaf(np.ones((2, 2))))


def test_second_backward_without_reset_errors():
    x = dm.leaf(np.ones((2, 2)))
    loss = dm.sum_all(x)
    dm.backward(loss)
    with pytest.raises(dm.GradientStateError):
        dm.backward(loss)


def test_shared_subexpression_accumulates():
    x = dm.leaf([[2.0]])
    y = dm.add(x, x)
    dm.backward(dm.sum_all(y))
    assert x.grad[0, 0] == 2.0


def test_finite_diff_quadratic_is_exact():
    x = np.random.default_rng(1).standard_normal((4, 3))
    err = dm.finite_diff_check(lambda a: dm.sum_all(dm.matmul(dm.transpose(a), a)), x)
    assert err < 1e-8


def test_finite_diff_cycle_symmetric_loss():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 6))
    fixed = dm.l2_normalize_columns(dm.constant(y))
    cfg = LossConfig(mode="symmetric")
    err = dm.finite_diff_check(
        lambda a: loss_symmetric(cycle_matrix(dm.l2_normalize_columns(a), fixed, cfg)), x)
    assert err < 1e-4


def test_finite_diff_skip_masks_kink():
    # hinge exactly at its kink: central differences give 0.5, analytic 0
    x = np.array([[0.0, 1.0]])
    assert dm.finite_diff_check(lambda a: dm.sum_all(dm.hinge(a)), x) > 0.1
    err = dm.finite_diff_check(lambda a: dm.sum_all(dm.hinge(a)), x, skip=np.array([[True, False]]))
    assert err < 1e-8


def test_finite_diff_detects_wrong_gradient():
    def bad_square(a):
        out = dm.Node(a.value ** 2, (a,), "bad_square")

        def _backward(g):
            a._accumulate(g * a.value)  # missing factor 2
        out._backward = _backward
        return dm.sum_all(out)
    assert dm.finite_diff_check(bad_square, np.array([[1.5, -0.7]])) > 0.1


matrices = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-5, 5, allow_nan=False))


@given(matrices, st.floats(0.1, 20))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_sum_to_one(x, t):
    out = dm.row_softmax(dm.constant(x), t).value
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert (out >= 0).all()


@given(matrices)
@settings(max_examples=60, deadline=None)
def test_normalized_columns_have_unit_norm(x):
    x = x + np.where(np.abs(x).sum(axis=0, keepdims=True) < 1e-3, 1.0, 0.0)
    out = dm.l2_normalize_columns(dm.constant(x)).value
    assert np.allclose(np.linalg.norm(out, axis=0), 1.0)


@given(matrices)
@settings(max_examples=40, deadline=None)
def test_softplus_gradient_is_sigmoid(x):
    node = dm.leaf(x)
    dm.backward(dm.sum_all(dm.softplus(node)))
    assert np.allclose(node.grad, 1 / (1 + np.exp(-x)))


def test_softplus_is_stable_for_large_inputs():
    out = dm.softplus(dm.constant([[800.0, -800.0]])).value
    assert np.isfinite(out).all()
    assert out[0, 0] == pytest.approx(800.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)
