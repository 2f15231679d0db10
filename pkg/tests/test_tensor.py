import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from yoloppa.tensor import (
    NonFiniteError,
    Precision,
    TapeError,
    Tensor,
    TensorError,
    get_precision,
    gradient_check,
    no_grad,
    ops,
    precision,
)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def naive_conv(x, w, b, stride, pad):
    """Direct six-loop convolution, the reference for conv2d."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for q in range(wo):
                    patch = xp[i, :, r * stride:r * stride + k, q * stride:q * stride + k]
                    out[i, o, r, q] = np.sum(patch * w[o]) + (0 if b is None else b[o])
    return out


# --------------------------------------------------------------------- conv / pool

class TestConv:
    def test_scalar_kernel(self):
        y = ops.conv2d(T([[[[1, 2], [3, 4]]]]), T(np.full((1, 1, 1, 1), 2.0)))
        np.testing.assert_array_equal(y.data, [[[[2, 4], [6, 8]]]])

    def test_ones_kernel_padded(self):
        y = ops.conv2d(T([[[[1, 2], [3, 4]]]]), T(np.ones((1, 1, 3, 3))), pad=1)
        np.testing.assert_array_equal(y.data, [[[[10, 10], [10, 10]]]])

    def test_stride_two_shape(self):
        with no_grad():
            y = ops.conv2d(Tensor(np.zeros((1, 3, 160, 160))), Tensor(np.zeros((16, 3, 3, 3))), stride=2, pad=1)
        assert y.shape == (1, 16, 80, 80)

    @given(n=st.integers(1, 2), c=st.integers(1, 3), co=st.integers(1, 3), h=st.integers(1, 7),
           w=st.integers(1, 7), k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 3), pad=st.integers(0, 2),
           seed=st.integers(0, 2**16))
    def test_matches_direct_loops(self, n, c, co, h, w, k, stride, pad, seed):
        if h + 2 * pad < k or w + 2 * pad < k:
            with pytest.raises(TensorError):
                ops.conv2d(T(np.zeros((n, c, h, w))), T(np.zeros((co, c, k, k))), stride=stride, pad=pad)
            return
        r = np.random.default_rng(seed)
        x, wt, b = r.standard_normal((n, c, h, w)), r.standard_normal((co, c, k, k)), r.standard_normal(co)
        y = ops.conv2d(T(x), T(wt), T(b), stride, pad)
        assert y.shape == (n, co, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
        np.testing.assert_allclose(y.data, naive_conv(x, wt, b, stride, pad), rtol=1e-10, atol=1e-10)

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(TensorError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)|\(2, 2, 3, 3\).*\(1, 3, 4, 4\)"):
            ops.conv2d(T(np.zeros((1, 3, 4, 4))), T(np.zeros((2, 2, 3, 3))))


class TestPool:
    def test_max(self):
        assert ops.pool2d(T([[[[1, 2], [3, 4]]]]), "max", 2, 2).data.item() == 4

    def test_avg(self):
        assert ops.pool2d(T([[[[1, 2], [3, 4]]]]), "avg", 2, 2).data.item() == 2.5

    def test_max_constant_same_shape(self):
        x = T(np.full((1, 2, 6, 5), 1.75))
        y = ops.pool2d(x, "max", 5, 1, 2)
        assert y.shape == x.shape
        assert (y.data == 1.75).all()

    def test_tie_routes_to_first_index(self):
        x = T(np.ones((1, 1, 2, 2)), grad=True)
        ops.sum(ops.pool2d(x, "max", 2, 2)).backward()
        np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])

    def test_pad_not_below_k(self):
        with pytest.raises(TensorError):
            ops.pool2d(T(np.zeros((1, 1, 4, 4))), "max", 2, 1, 2)

    def test_adaptive(self):
        assert (ops.adaptive_avg_pool(T(np.full((1, 1, 4, 4), 3.0)), 2, 2).data == 3.0).all()
        assert ops.adaptive_avg_pool(T([[[[1, 2], [3, 4]]]]), 1, 1).data.item() == 2.5

    def test_adaptive_ramp_against_windows(self):
        x = np.arange(32, dtype=np.float64).reshape(1, 2, 4, 4)
        y = ops.adaptive_avg_pool(T(x), 2, 2).data
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    assert y[0, c, i, j] == x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean()

    def test_adaptive_non_divisible(self):
        with pytest.raises(TensorError):
            ops.adaptive_avg_pool(T(np.zeros((1, 1, 5, 4))), 2, 2)


# --------------------------------------------------------------------- linear / softmax

def test_linear_identity_and_hand_product():
    np.testing.assert_array_equal(ops.linear(T([1, 2]), T(np.eye(2)), T([0, 0])).data, [1, 2])
    np.testing.assert_array_equal(ops.linear(T([1, 2]), T([[1, 0], [1, 1]]), T([1, 1])).data, [4, 3])


def test_linear_batch_shape_and_mismatch():
    assert ops.linear(T(np.zeros((3, 5, 4))), T(np.zeros((4, 6)))).shape == (3, 5, 6)
    with pytest.raises(TensorError):
        ops.linear(T(np.zeros((3, 4))), T(np.zeros((5, 6))))


@pytest.mark.parametrize("x,expected", [
    ([0, 0, 0], [1 / 3, 1 / 3, 1 / 3]),
    ([1, 2], [0.26894142, 0.73105858]),
    ([1000, 1000], [0.5, 0.5]),
])
def test_softmax_values(x, expected):
    np.testing.assert_allclose(ops.softmax(T(x), axis=0).data, expected, atol=1e-7)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    y = ops.softmax(T([vals, vals[::-1]]), axis=1).data
    assert (y > 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


# --------------------------------------------------------------------- elementwise

def test_elementwise_values():
    np.testing.assert_array_equal(ops.relu(T([-1, 0, 2])).data, [0, 0, 2])
    assert ops.sigmoid(T(0.0)).item() == 0.5
    assert abs(ops.silu(T(1.0)).item() - 0.7310585786) < 1e-9
    assert ops.elementwise("scale", T([1.0, 2.0]), 3.0).data.tolist() == [3.0, 6.0]


def test_relu_subgradient_zero():
    x = T([0.0, 1.0], grad=True)
    ops.sum(ops.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0]


def test_log_non_positive_errors():
    with pytest.raises(TensorError):
        ops.log(T([1.0, 0.0]))


def test_no_broadcasting():
    with pytest.raises(TensorError):
        ops.add(T(np.zeros((2, 3))), T(np.zeros((1, 3))))
    assert ops.add(T(np.zeros((2, 3))), 1.0).data.sum() == 6


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        ops.exp(T([1000.0]))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))


# --------------------------------------------------------------------- shape ops

def test_concat_and_upsample():
    assert ops.concat([T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 4, 4)))], axis=1).shape == (1, 5, 4, 4)
    up = ops.upsample_nearest(T([[[[1, 2], [3, 4]]]]), 2).data[0, 0]
    np.testing.assert_array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


@given(c=st.integers(2, 8), seed=st.integers(0, 1000), data=st.data())
def test_slice_concat_identity(c, seed, data):
    cut = data.draw(st.integers(1, c - 1))
    x = T(np.random.default_rng(seed).standard_normal((2, c, 3, 3)))
    y = ops.concat([ops.slice_channels(x, 0, cut), ops.slice_channels(x, cut, c)], axis=1)
    assert np.array_equal(y.data, x.data)


def test_shape_errors():
    with pytest.raises(TensorError):
        ops.slice_channels(T(np.zeros((1, 4, 2, 2))), 3, 3)
    with pytest.raises(TensorError):
        ops.reshape(T(np.zeros((2, 3))), (4, 2))
    with pytest.raises(TensorError):
        ops.concat([T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 2, 3, 4)))], axis=1)


def test_upsample_backward_sums_windows():
    x = T(np.ones((1, 1, 2, 2)), grad=True)
    ops.sum(ops.upsample_nearest(x, 3)).backward()
    assert (x.grad == 9).all()


# --------------------------------------------------------------------- batch norm

def test_bn_train_normalizes_and_updates_running(rng):
    x = rng.standard_normal((4, 2, 5, 5)) * 2 + 5
    rm, rv = np.zeros(2), np.ones(2)
    y = ops.batchnorm2d(T(x), T(np.ones(2)), T(np.zeros(2)), rm, rv, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    bm = x.mean(axis=(0, 2, 3))
    bv = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * bm)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * bv)


def test_bn_eval_affine():
    y = ops.batchnorm2d(T(np.zeros((1, 1, 1, 1))), T([2.0]), T([3.0]), np.zeros(1), np.ones(1), training=False)
    assert abs(y.item() - 3.0) < 1e-12
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    y = ops.batchnorm2d(T(x), T(np.ones(2)), T(np.zeros(2)), np.zeros(2), np.ones(2), training=False)
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5))


def test_bn_single_value_train_errors():
    with pytest.raises(TensorError):
        ops.batchnorm2d(T(np.zeros((1, 1, 1, 1))), T([1.0]), T([0.0]), np.zeros(1), np.ones(1), training=True)


# --------------------------------------------------------------------- tape

def test_backward_simple_adjoints():
    x = T(np.zeros((2, 3)), grad=True)
    ops.sum(x).backward()
    assert (x.grad == 1).all()
    x = T([1.0, 2.0, 3.0], grad=True)
    ops.sum(ops.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_fan_out_accumulates():
    x = T([1.5], grad=True)
    y = ops.add(ops.mul(x, x), ops.scale(x, 3.0))
    ops.sum(y).backward()
    assert x.grad.tolist() == [6.0]


def test_non_scalar_and_double_backward():
    x = T([1.0, 2.0], grad=True)
    with pytest.raises(TapeError):
        ops.scale(x, 2.0).backward()
    loss = ops.sum(ops.scale(x, 2.0))
    loss.backward()
    with pytest.raises(TapeError):
        loss.backward()


def test_no_grad_records_nothing():
    x = T([1.0], grad=True)
    with no_grad():
        y = ops.scale(x, 2.0)
    assert y._node is None and not y.requires_grad


def test_precision_is_thread_local():
    seen = {}

    def worker():
        seen["p"] = get_precision()

    with precision(Precision.DOUBLE):
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert get_precision() is Precision.DOUBLE
    assert seen["p"] is Precision.SINGLE
    assert Tensor(np.zeros(2)).dtype == np.float32


def test_determinism(rng):
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    a = ops.conv2d(T(x), T(w), pad=1).data
    b = ops.conv2d(T(x), T(w), pad=1).data
    assert np.array_equal(a, b)


# --------------------------------------------------------------------- gradient_check

def test_gradcheck_requires_double():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TensorError):
        gradient_check(lambda x: ops.sum(x), [x])


def test_gradcheck_sigmoid_and_conv(double, rng):
    x = T(rng.standard_normal(6), grad=True)
    assert gradient_check(lambda x: ops.sum(ops.sigmoid(x)), [x], tol=1e-6).passed
    xi, w = T(rng.standard_normal((1, 2, 4, 4)), grad=True), T(rng.standard_normal((3, 2, 3, 3)), grad=True)
    assert gradient_check(lambda a, b: ops.sum(ops.conv2d(a, b, pad=1)), [xi, w], tol=1e-4).passed


def test_gradcheck_excludes_relu_kink(double):
    x = T([0.0, 1.0, -2.0], grad=True)
    rep = gradient_check(lambda x: ops.sum(ops.relu(x)), [x])
    assert rep.excluded == 1 and rep.checked == 2 and rep.passed


def test_gradcheck_detects_wrong_adjoint(double):
    from yoloppa.tensor.core import make_result

    def bad_square(x):
        return make_result("bad", x.data ** 2, [x], lambda g: [g * x.data])  # missing factor 2

    x = T([1.0, 2.0], grad=True)
    assert not gradient_check(lambda x: ops.sum(bad_square(x)), [x]).passed
