import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poiformer import tensor_core as tc
from poiformer.tensor_core import GradReport, NonFiniteError, ShapeError, Tensor, grad_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_add_broadcast_gradient_sums_over_broadcast_axis():
    a = leaf(np.zeros((2, 3)))
    b = leaf([1.0, 2.0, 3.0])
    tc.backward(tc.add(a, b).sum())
    assert np.array_equal(a.grad, np.ones((2, 3)))
    assert np.array_equal(b.grad, [2.0, 2.0, 2.0])


def test_shared_leaf_accumulates_both_paths():
    x = leaf([3.0])
    y = tc.add(tc.mul(x, x), tc.scale(x, 2.0))  # x^2 + 2x
    tc.backward(y.sum())
    assert x.grad[0] == pytest.approx(8.0)


def test_grad_accumulates_across_backward_calls_until_zeroed():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        tc.backward(tc.scale(x, 3.0).sum())
    assert np.array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_matmul_values_and_shape_error_names_both_shapes():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    b = Tensor(np.arange(12.0).reshape(3, 4))
    assert np.array_equal(tc.matmul(a, b).data, a.data @ b.data)
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[4, 3\]"):
        tc.matmul(a, Tensor(np.zeros((4, 3))))


def test_batched_matmul_against_2d_weight_matches_einsum():
    rng = np.random.default_rng(0)
    a, w = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 4))
    out = tc.matmul(Tensor(a), Tensor(w)).data
    assert np.allclose(out, np.einsum("bnk,km->bnm", a, w), atol=1e-12)


def test_softmax_rows_sum_to_one_and_survive_large_logits():
    x = Tensor(np.array([[1000.0, 1000.0, 999.0], [-5.0, 0.0, 5.0]]))
    s = tc.softmax(x, axis=-1).data
    assert np.all(np.isfinite(s))
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-15)


def test_softmax_of_zeros_is_uniform():
    assert np.allclose(tc.softmax(Tensor(np.zeros((1, 4))), axis=-1).data, 0.25)


def test_softmax_bad_axis():
    with pytest.raises(IndexError):
        tc.softmax(Tensor(np.zeros((2, 2))), axis=2)


def test_log_softmax_matches_log_of_softmax():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 5)))
    assert np.allclose(tc.log_softmax(x).data, np.log(tc.softmax(x).data), atol=1e-12)


def test_cross_entropy_uniform_logits_is_log_classes():
    loss = tc.cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6])
    assert float(loss.data) == pytest.approx(math.log(7), abs=1e-12)


def test_layer_norm_zero_mean_unit_variance():
    x = Tensor(np.random.default_rng(2).normal(3.0, 5.0, size=(4, 16)))
    y = tc.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_errors():
    x = Tensor(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        tc.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)
    with pytest.raises(ShapeError):
        tc.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_l2_normalize_unit_rows_and_zero_row_stays_finite():
    y = tc.l2_normalize(Tensor(np.array([[3.0, 4.0], [0.0, 0.0]])), axis=-1).data
    assert np.allclose(y[0], [0.6, 0.8])
    assert np.array_equal(y[1], [0.0, 0.0])


def test_take_gradient_scatters_repeated_rows():
    table = leaf(np.zeros((4, 2)))
    tc.backward(tc.take(table, [1, 1, 3]).sum())
    assert np.array_equal(table.grad[:, 0], [0.0, 2.0, 0.0, 1.0])


def test_dropout_inverted_scaling_and_eval_identity():
    x = Tensor(np.ones((200, 50)))
    y = tc.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert y.mean() == pytest.approx(1.0, abs=0.03)
    assert tc.dropout(x, 0.5, np.random.default_rng(0), training=False) is x
    with pytest.raises(ValueError):
        tc.dropout(x, 1.0, None, training=True)


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        tc.backward(leaf([1.0, 2.0]))


def test_no_grad_records_no_graph():
    x = leaf([1.0])
    with tc.no_grad():
        y = tc.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_float32_build_stays_float32():
    a = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((3, 2), dtype=np.float32), requires_grad=True)
    y = tc.layer_norm(tc.matmul(a, w), Tensor(np.ones(2, dtype=np.float32)), Tensor(np.zeros(2, dtype=np.float32)))
    assert y.dtype == np.float32
    tc.backward(y.sum())
    assert a.grad.dtype == np.float32


def test_grad_check_detects_a_wrong_backward():
    x = leaf([0.3, -1.2])

    def broken():
        return tc._result(x.data ** 2, (x,), lambda g: (g * x.data,), "half_square_grad").sum()

    report = grad_check(broken, [x], op_name="broken")
    assert isinstance(report, GradReport)
    assert not report.passed(1e-4)
    assert report.max_rel_error == pytest.approx(1 / 3, rel=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_raises_on_nan():
    x = leaf([-1.0])
    with pytest.raises(NonFiniteError):
        grad_check(lambda: tc.log(x).sum(), [x])


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_mul_gradient_is_other_operand(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng.normal(size=(rows, cols))), leaf(rng.normal(size=(rows, cols)))
    tc.backward(tc.mul(a, b).sum())
    assert np.array_equal(a.grad, b.data)
    assert np.array_equal(b.grad, a.data)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 6), seed=st.integers(0, 2**16))
def test_softmax_invariant_to_row_shift(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, n))
    shift = rng.normal(size=(3, 1)) * 50
    assert np.allclose(tc.softmax(Tensor(x)).data, tc.softmax(Tensor(x + shift)).data, atol=1e-12)
