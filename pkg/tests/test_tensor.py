"""Autodiff: checagem por diferenças finitas e semântica das operações."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from data.errors import (
    BatchTooSmallError,
    DimensionError,
    EmptyBatchError,
    IndexRangeError,
    InvalidTargetError,
    RankError,
)
from conftest import assert_gradcheck
from engine.tensor import (
    DTensor,
    Graph,
    NormState,
    add,
    backward,
    batch_norm,
    concat_cols,
    constant,
    exp,
    gather_rows,
    log,
    log_softmax,
    matmul,
    mul,
    parameter,
    relu,
    scale,
    scatter_max,
    softmax_cross_entropy,
    sub,
    sum_all,
)


def test_matmul_add_mul_gradients(rng):
    a = parameter(rng.normal(size=(4, 3)))
    b = parameter(rng.normal(size=(3, 5)))
    bias = parameter(rng.normal(size=5))
    w = parameter(rng.normal(size=5))

    def build() -> DTensor:
        h = add(matmul(a, b), bias)
        return sum_all(mul(sub(h, w), h))

    assert_gradcheck(build, [a, b, bias, w])


def test_unary_ops_gradients(rng):
    x = parameter(rng.uniform(0.5, 2.0, size=(3, 4)))

    def build() -> DTensor:
        return sum_all(add(scale(log(x), 0.7), exp(scale(x, -1.0))))

    assert_gradcheck(build, [x])


def test_relu_subgradient_is_zero_at_zero():
    x = parameter(np.array([[-1.0, 0.0, 2.0]]))
    backward(sum_all(relu(x)))
    np.testing.assert_array_equal(x.grad, [[0.0, 0.0, 1.0]])


def test_concat_cols_gradients(rng):
    a = parameter(rng.normal(size=(3, 2)))
    b = parameter(rng.normal(size=(3, 4)))
    w = constant(rng.normal(size=(6, 1)))
    assert_gradcheck(lambda: sum_all(mul(matmul(concat_cols([a, b]), w), matmul(concat_cols([a, b]), w))), [a, b])


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradients(rng, mode):
    x = parameter(rng.normal(size=(6, 3)))
    state = NormState.create(3)
    state.running_mean[...] = rng.normal(size=3)
    state.running_var[...] = rng.uniform(0.5, 2.0, size=3)
    state.gamma.data[...] = rng.normal(size=3)
    state.beta.data[...] = rng.normal(size=3)
    target = constant(rng.normal(size=(6, 3)))
    snapshot = (state.running_mean.copy(), state.running_var.copy())

    def build() -> DTensor:
        state.running_mean[...], state.running_var[...] = snapshot
        out = batch_norm(x, state, mode)
        return sum_all(mul(out, target))

    assert_gradcheck(build, [x, state.gamma, state.beta])


def test_batch_norm_running_stats_use_unbiased_variance():
    x = constant(np.array([[1.0], [3.0]]))
    state = NormState.create(1)
    batch_norm(x, state, "train")
    np.testing.assert_allclose(state.running_mean, [0.9 * 0.0 + 0.1 * 2.0])
    np.testing.assert_allclose(state.running_var, [0.9 * 1.0 + 0.1 * 2.0])


def test_batch_norm_train_needs_two_rows():
    with pytest.raises(BatchTooSmallError):
        batch_norm(constant(np.ones((1, 2))), NormState.create(2), "train")


def test_batch_norm_eval_accepts_single_row():
    out = batch_norm(constant(np.full((1, 2), 3.0)), NormState.create(2), "eval")
    np.testing.assert_allclose(out.data, 3.0 / np.sqrt(1.0 + 1e-5))


def test_cross_entropy_gradient_and_ignore(rng):
    logits = parameter(rng.normal(size=(5, 8)))
    targets = np.eye(8)[rng.integers(0, 8, size=5)]
    ignore = np.array([False, True, False, False, True])
    assert_gradcheck(lambda: softmax_cross_entropy(logits, targets, ignore), [logits])
    assert np.all(logits.grad[ignore] == 0.0)


def test_cross_entropy_soft_labels_and_errors():
    logits = constant(np.zeros((2, 8)))
    soft = np.zeros((2, 8))
    soft[:, 0] = soft[:, 1] = 0.5
    assert softmax_cross_entropy(logits, soft).item() == pytest.approx(np.log(8))
    with pytest.raises(InvalidTargetError):
        softmax_cross_entropy(logits, np.zeros((2, 8)))
    with pytest.raises(EmptyBatchError):
        softmax_cross_entropy(logits, soft, np.array([True, True]))


def test_log_softmax_is_stable_for_huge_logits():
    out = log_softmax(np.array([[1e4, 0.0, -1e4]]))
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(0.0)


@given(arrays(np.float64, (4, 8), elements=st.floats(-50, 50)))
@settings(max_examples=50, deadline=None)
def test_log_softmax_normalizes(logits):
    np.testing.assert_allclose(np.exp(log_softmax(logits)).sum(axis=1), 1.0, rtol=1e-12)


def test_scatter_max_ties_and_empty_cells():
    feats = constant(np.array([[1.0, 5.0], [1.0, 2.0], [0.5, 7.0]]))
    out, argmax = scatter_max(feats, np.array([0, 0, 2]), 3)
    np.testing.assert_array_equal(out.data, [[1.0, 5.0], [0.0, 0.0], [0.5, 7.0]])
    np.testing.assert_array_equal(argmax, [[0, 0], [-1, -1], [2, 2]])


def test_scatter_max_gradient_routes_to_winner(rng):
    feats = parameter(rng.normal(size=(10, 3)))
    ids = rng.integers(0, 4, size=10)
    weights = constant(rng.normal(size=(4, 3)))
    assert_gradcheck(lambda: sum_all(mul(scatter_max(feats, ids, 4)[0], weights)), [feats])


def test_gather_rows_accumulates_repeated_ids(rng):
    cells = parameter(rng.normal(size=(3, 2)))
    backward(sum_all(gather_rows(cells, np.array([0, 0, 2]))))
    np.testing.assert_array_equal(cells.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_cell_ops_reject_bad_ids():
    with pytest.raises(IndexRangeError):
        gather_rows(constant(np.zeros((3, 2))), np.array([3]))
    with pytest.raises(DimensionError):
        scatter_max(constant(np.zeros((3, 2))), np.array([0, 1]), 2)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(constant(np.zeros((2, 3))), constant(np.zeros((2, 3))))


def test_backward_requires_scalar():
    with pytest.raises(RankError):
        backward(parameter(np.zeros(3)))


def test_shared_subexpression_accumulates_once_per_use(rng):
    x = parameter(rng.normal(size=(2, 2)))
    h = mul(x, x)
    loss = sum_all(add(h, h))
    graph = Graph.trace(loss)
    assert len({id(t) for t in graph.order}) == len(graph.order)
    backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_leaf_gradients_accumulate_across_calls(rng):
    x = parameter(rng.normal(size=3))
    backward(sum_all(x))
    backward(sum_all(x))
    np.testing.assert_array_equal(x.grad, 2.0)


def test_reduction_results_stay_zero_dimensional(rng):
    x = parameter(rng.normal(size=(3, 2)))
    loss = scale(sum_all(x), 2.0)
    assert loss.data.ndim == 0
    assert loss.shape == ()
    backward(loss)
    np.testing.assert_array_equal(x.grad, np.full((3, 2), 2.0))
