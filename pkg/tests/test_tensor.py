import threading
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stic import tensor as T
from stic.gradcheck import check_grad, max_rel_error, numerical_grad
from stic.tensor import DisconnectedInputWarning, ShapeError, Tensor

from graphs import random_graph

finite = st.floats(-3, 3, allow_nan=False, width=64)


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# --- elementwise and reductions -----------------------------------------


@pytest.mark.parametrize(
    "op",
    [T.exp, T.tanh, T.sigmoid, T.square, T.neg, lambda a: T.log(T.add_scalar(T.square(a), 1.0))],
)
def test_unary_grad(op):
    assert check_grad(lambda a: T.sum(op(a)), [rand(3, 4)]) < 1e-6


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, lambda a, b: T.div(a, T.add_scalar(T.square(b), 1.0))])
def test_binary_grad(op):
    assert check_grad(lambda a, b: T.sum(T.tanh(op(a, b))), [rand(2, 5), rand(2, 5, seed=1)]) < 1e-6


def test_relu_away_from_kink():
    x = np.array([[-1.5, -0.2, 0.3, 2.0]])
    assert check_grad(lambda a: T.sum(T.square(T.relu(a))), [x]) < 1e-8


def test_sigmoid_stable_at_extremes():
    out = T.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


@pytest.mark.parametrize("axis", [None, 0, 1, (0, 1)])
def test_sum_mean_grad(axis):
    x = rand(3, 4)
    assert check_grad(lambda a: T.sum(T.square(T.sum(a, axis=axis))), [x]) < 1e-6
    assert check_grad(lambda a: T.sum(T.square(T.mean(a, axis=axis))), [x]) < 1e-6


def test_logsumexp_shift_stable():
    x = np.array([[1000.0, 1000.0], [-1000.0, -1000.0]])
    np.testing.assert_allclose(T.logsumexp(Tensor(x), -1).data, [1000 + np.log(2), -1000 + np.log(2)])


def test_softmax_rows_sum_to_one():
    p = T.softmax(Tensor(rand(5, 7) * 50), -1).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_cross_entropy_uniform_logits():
    ce = T.cross_entropy_soft(Tensor(np.zeros((4, 3))), np.eye(3)[[0, 1, 2, 0]])
    assert abs(ce.item() - np.log(3)) < 1e-12


# --- shape ops ----------------------------------------------------------


def test_matmul_grad_2d_and_batched():
    assert check_grad(lambda a, b: T.sum(T.tanh(T.matmul(a, b))), [rand(3, 4), rand(4, 2, seed=1)]) < 1e-6
    assert check_grad(lambda a, b: T.sum(T.tanh(a @ b)), [rand(2, 3, 4), rand(2, 4, 5, seed=1)]) < 1e-6


def test_index_and_scatter_accumulate():
    idx = (np.array([0, 0, 2]),)
    x = Tensor(rand(3, 2), requires_grad=True)
    T.sum(T.index(x, idx)).backward()
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_concat_transpose_reshape_grad():
    def fn(a, b):
        c = T.concat([a, b], 0)
        return T.sum(T.tanh(T.reshape(T.transpose(c), (3, 4))) * T.Tensor(rand(3, 4, seed=9)))

    assert check_grad(fn, [rand(2, 3), rand(2, 3, seed=1)]) < 1e-6


def test_expand_rejects_bad_target():
    with pytest.raises(ShapeError):
        T.expand(Tensor(np.ones((2, 3))), (4, 3))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_zero_d_operand_lifts():
    out = T.mul(Tensor(np.ones((2, 2))), Tensor(np.array(3.0)))
    np.testing.assert_array_equal(out.data, 3 * np.ones((2, 2)))


def test_python_scalars_route_to_scalar_ops():
    x = Tensor(np.array([1.0, 2.0]))
    np.testing.assert_array_equal((x * 2 + 1).data, [3.0, 5.0])
    np.testing.assert_array_equal((1 - x).data, [0.0, -1.0])


# --- convolutions ---------------------------------------------------------


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_grad(stride, padding):
    x, w, b = rand(2, 2, 5, 5), rand(3, 2, 3, 3, seed=1), rand(3, seed=2)
    fn = lambda x, w, b: T.sum(T.tanh(T.conv2d(x, w, b, stride=stride, padding=padding)))  # noqa: E731
    assert check_grad(fn, [x, w, b]) < 1e-6


def test_conv2d_matches_direct_loop():
    x, w = rand(1, 2, 4, 4), rand(3, 2, 3, 3, seed=1)
    out = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 4, 4))
    for f in range(3):
        for i in range(4):
            for j in range(4):
                ref[0, f, i, j] = (xp[0, :, i : i + 3, j : j + 3] * w[f]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_rejects_stride_3():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(rand(1, 1, 6, 6)), Tensor(rand(1, 1, 3, 3)), stride=3)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
def test_conv_transpose_is_adjoint(stride, padding):
    x, w = rand(1, 2, 4, 4), rand(2, 3, 4, 4, seed=1)
    y = T.conv_transpose2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
    assert y.shape[2] == (4 - 1) * stride - 2 * padding + 4
    u = rand(*y.shape, seed=3)
    # <convT(x, w), u> == <x, conv(u, w)>; w is (C_in, C_out, k, k) for convT and read as (F, C, k, k) by conv
    lhs = (y.data * u).sum()
    rhs = (x * T.conv2d(Tensor(u), Tensor(w), stride=stride, padding=padding).data).sum()
    assert abs(lhs - rhs) < 1e-9


def test_conv_transpose_grad():
    fn = lambda x, w: T.sum(T.tanh(T.conv_transpose2d(x, w, stride=2, padding=1)))  # noqa: E731
    assert check_grad(fn, [rand(1, 2, 3, 3), rand(2, 1, 4, 4, seed=1)]) < 1e-6


# --- engine ---------------------------------------------------------------


def test_backward_accumulates_into_leaves():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.sum(T.square(x)).backward()
    T.sum(T.square(x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_double_backward_matches_second_derivative():
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    (g,) = T.grad(T.sum(T.tanh(x)), [x], create_graph=True)
    (h,) = T.grad(T.sum(g), [x])
    t = np.tanh(x.data)
    np.testing.assert_allclose(h.data, -2 * t * (1 - t**2), rtol=1e-12)


def test_double_backward_through_conv():
    def hvp(x, w):
        # finite differences pass constants; re-leaf them so the inner grad exists
        xt = x if x.requires_grad else Tensor(x.data, requires_grad=True)
        (g,) = T.grad(T.sum(T.square(T.conv2d(xt, w, padding=1))), [xt], create_graph=True)
        return T.sum(T.square(g))

    assert check_grad(hvp, [rand(1, 1, 3, 3), rand(2, 1, 3, 3, seed=1)]) < 1e-6


def test_disconnected_input_warns_and_returns_zeros():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    with pytest.warns(DisconnectedInputWarning):
        gx, gy = T.grad(T.sum(T.square(x)), [x, y])
    np.testing.assert_array_equal(gy.data, np.zeros(2))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad and y.is_leaf


def test_grad_mode_is_thread_local():
    seen = []

    def worker():
        seen.append(T.is_grad_enabled())

    with T.no_grad():
        th = threading.Thread(target=worker)
        th.start()
        th.join()
        assert not T.is_grad_enabled()
    assert seen == [True]


def test_grad_wrt_input_shape():
    x = Tensor(rand(2, 3), requires_grad=True)
    g = T.grad_wrt_input(T.sum(T.square(x)), x)
    np.testing.assert_allclose(g.data, 2 * x.data)


def test_random_graphs_small_sample():
    for seed in range(10):
        fn, inputs = random_graph(seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DisconnectedInputWarning)
            assert check_grad(fn, inputs) < 1e-4


# --- properties -----------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_product_rule(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    ga, gb = T.grad(T.sum(T.mul(ta, tb)), [ta, tb])
    np.testing.assert_array_equal(ga.data, b)
    np.testing.assert_array_equal(gb.data, a)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3,), elements=finite))
def test_softmax_grad_sums_to_zero(a):
    x = Tensor(a, requires_grad=True)
    w = np.array([1.0, -2.0, 0.5])
    (g,) = T.grad(T.sum(T.mul(T.softmax(x, -1), Tensor(w))), [x])
    assert abs(g.data.sum()) < 1e-12


def test_numerical_grad_of_quadratic():
    (g,) = numerical_grad(lambda a: T.sum(T.square(a)), [np.array([1.0, -2.0])])
    assert max_rel_error(g, [2.0, -4.0]) < 1e-8
