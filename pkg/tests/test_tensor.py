import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dysi import tensor as T
from dysi.errors import NumericError, ShapeError
from dysi.tensor import Tensor

from conftest import numeric_grad, rel_err


def param(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True, dtype=np.float64)


def check_grad(loss_fn, *params, tol=1e-3):
    """Analytic vs central-difference gradients for every entry of every param."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    for p, g in zip(params, analytic):
        num = numeric_grad(lambda: loss_fn().item(), p.data)
        assert rel_err(g, num) < tol, p.name


# --- softmax family -------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_ln3():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(3)], dtype=np.float64)).data,
                               [0.25, 0.75], atol=1e-12)


@pytest.mark.parametrize("c", [-1e4, -3.0, 0.0, 17.5, 1e4])
def test_softmax_shift_invariant(c):
    out = T.softmax(Tensor([c, c + math.log(3)], dtype=np.float64)).data
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-9)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        T.log_softmax(Tensor([0.0, np.inf]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (3, 7), elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_sum_to_one(z):
    s = T.softmax(Tensor(z)).data
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)


def test_log_softmax_not_log_of_softmax():
    # a gap of 200 underflows exp in float32, log_softmax must stay finite
    lp = T.log_softmax(Tensor([0.0, 200.0])).data
    assert np.isfinite(lp).all()
    assert lp[0] == pytest.approx(-200.0)


# --- label smoothing ------------------------------------------------------

def test_nll_plain():
    lp = Tensor(np.log([[0.5, 0.25, 0.25]]), dtype=np.float64)
    assert T.label_smoothed_nll(lp, [0], 0.0).data[0] == pytest.approx(0.6931, abs=1e-4)


def test_nll_smoothing_uniform_v4():
    lp = Tensor(np.log(np.full((1, 4), 0.25)), dtype=np.float64)
    for t in range(4):
        assert T.label_smoothed_nll(lp, [t], 0.1).data[0] == pytest.approx(1.3863, abs=1e-4)


def test_nll_smoothing_v2_hand_value():
    lp = Tensor(np.log([[0.9, 0.1]]), dtype=np.float64)
    expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert expected == pytest.approx(0.3251, abs=1e-4)
    assert T.label_smoothed_nll(lp, [0], 0.1).data[0] == pytest.approx(expected, abs=1e-12)


def test_nll_eps0_is_bitwise_negative_logprob():
    lp = T.log_softmax(param((4, 9), seed=2))
    tgt = np.array([0, 3, 8, 5])
    out = T.label_smoothed_nll(lp, tgt, 0.0).data
    assert np.array_equal(out, -lp.data[np.arange(4), tgt])


def test_nll_target_out_of_range():
    lp = Tensor(np.log(np.full((1, 4), 0.25)))
    with pytest.raises(IndexError):
        T.label_smoothed_nll(lp, [4], 0.1)


@pytest.mark.parametrize("eps", [0.0, 0.1])
def test_nll_gradient(eps):
    z = param((3, 6), seed=5)
    tgt = np.array([1, 0, 5])
    check_grad(lambda: T.label_smoothed_nll(T.log_softmax(z), tgt, eps).sum(), z)


# --- KL ---------------------------------------------------------------------

def kl(p, q):
    return T.kl_divergence(Tensor(p, dtype=np.float64), Tensor(np.log(q), dtype=np.float64)).item()


def test_kl_identity_zero():
    p = np.array([0.2, 0.3, 0.5])
    assert kl(p, p) == 0.0


def test_kl_one_hot_vs_uniform():
    assert kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)


def test_kl_hand_value():
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert expected == pytest.approx(0.1438, abs=1e-4)
    assert kl([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-12)


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        T.kl_divergence(Tensor([0.5, 0.5]), Tensor(np.log([0.2, 0.3, 0.5])))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(6, 0.3))
    q = rng.dirichlet(np.full(6, 0.3))
    assert kl(p, np.maximum(q, 1e-300)) >= -1e-6


def test_kl_gradient_learner_side_only():
    p = Tensor(np.random.default_rng(1).dirichlet(np.ones(5), size=3), dtype=np.float64)
    z = param((3, 5), seed=7)
    check_grad(lambda: T.kl_divergence(p, T.log_softmax(z)).sum(), z)


# --- backward and stop-gradient ---------------------------------------------

def test_backward_sum_gives_ones():
    x = param((2, 3))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        (param((3,)) * 2.0).backward()


def test_stop_gradient_values_and_no_grad():
    x = param((4,))
    y = T.stop_gradient(x)
    assert np.array_equal(x.data, y.data)
    x.grad = None
    loss = T.stop_gradient(x).sum() + (x * 0.0).sum()
    loss.backward()
    assert np.array_equal(x.grad, np.zeros(4))


def test_stop_gradient_one_frozen_factor():
    x = Tensor([2.0], requires_grad=True, dtype=np.float64)
    (x * T.stop_gradient(x)).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_no_grad_records_nothing():
    x = param((3,))
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad and y._parents == ()


def test_gradient_accumulates_over_shared_nodes():
    x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_array_equal(x.grad, [12.0])


# --- primitive gradients ------------------------------------------------------

def test_grad_linear_relu_two_layers():
    x = param((5, 4), seed=1)
    w1, b1 = param((4, 6), seed=2), param((6,), seed=3)
    w2, b2 = param((6, 3), seed=4), param((3,), seed=5)

    def loss():
        h = T.relu(T.linear(x, w1, b1))
        return (T.linear(h, w2, b2) * T.linear(h, w2, b2)).sum()

    check_grad(loss, x, w1, b1, w2, b2)


def test_grad_layer_norm():
    x, g, b = param((3, 8), seed=1), param((8,), seed=2), param((8,), seed=3)
    c = np.random.default_rng(0).normal(size=(3, 8))
    check_grad(lambda: (T.layer_norm(x, g, b) * c).sum(), x, g, b)


def test_grad_attention():
    q, k, v = param((2, 2, 3, 4), 1), param((2, 2, 5, 4), 2), param((2, 2, 5, 4), 3)
    bias = np.zeros((2, 1, 1, 5))
    bias[0, ..., 4] = -1e9
    c = np.random.default_rng(0).normal(size=(2, 2, 3, 4))
    check_grad(lambda: (T.attention(q, k, v, bias) * c).sum(), q, k, v)


def test_grad_embedding_and_matmul_reshape_transpose():
    table = param((7, 4), seed=1)
    w = param((2, 4, 3), seed=2)
    ids = np.array([[1, 3, 3], [6, 0, 1]])

    def loss():
        e = T.embedding(table, ids)                      # [2, 3, 4]
        y = T.matmul(e, w)                                # [2, 3, 3]
        z = y.transpose(0, 2, 1).reshape(2, 9)
        return (z * z).sum()

    check_grad(loss, table, w)


def test_grad_broadcast_add_mul_sub():
    a, b = param((3, 4), 1), param((4,), 2)
    check_grad(lambda: ((a + b) * (a - b) * b).sum(), a, b)


def test_grad_concat_and_mean():
    a, b = param((2, 3), 1), param((2, 2), 2)
    check_grad(lambda: T.mean(T.concat_last([a, b]) * T.concat_last([b, a])), a, b)


def test_grad_softmax():
    z = param((3, 5), 4)
    c = np.random.default_rng(0).normal(size=(3, 5))
    check_grad(lambda: (T.softmax(z) * c).sum(), z)


def test_grad_masked_mean():
    x = param((2, 3), 1)
    mask = np.array([[True, False, True], [False, False, True]])
    check_grad(lambda: T.masked_mean(x * x, mask), x)


def test_dropout_identity_without_rng_and_scaled_with_it():
    x = Tensor(np.ones((1000,)), dtype=np.float32)
    assert T.dropout(x, 0.5, None) is x
    y = T.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.75)}
    assert abs((y == 0).mean() - 0.25) < 0.05


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(param((4, 2)), np.array([4]))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(param((2, 3)), param((4, 2)))
