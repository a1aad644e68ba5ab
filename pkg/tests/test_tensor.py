import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msfpt import tensor as T
from msfpt.errors import ContractError, DimensionError, NonFiniteError
from msfpt.tensor import Tensor, finite_diff_grad

from conftest import check_op_grads, rel_err


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity(rng):
    x = rng.standard_normal((3, 3))
    out = T.matmul(t64(np.eye(3)), t64(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_hand_expansion():
    out = T.matmul(t64([[1, 2], [3, 4]]), t64([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_sum_grad_is_ones_times_bt(rng):
    a, b = t64(rng.standard_normal((3, 4)), True), t64(rng.standard_normal((4, 5)))
    T.sum_(T.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.data.T, rtol=1e-12)
    numeric = finite_diff_grad(lambda t: T.sum_(T.matmul(t, b)), a)
    assert rel_err(a.grad, numeric) < 1e-4


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        T.matmul(t64(np.ones((2, 2, 3))), t64(np.ones((3, 3, 2))))


@pytest.mark.parametrize("seed", range(3))
def test_matmul_batched_grads(seed):
    rng = np.random.default_rng(seed)
    assert check_op_grads(T.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))]) < 1e-4
    assert check_op_grads(T.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))]) < 1e-4


# -- conv2d ------------------------------------------------------------------

def test_conv_1x1_unit_kernel_is_identity(rng):
    x = rng.standard_normal((1, 5, 6))
    out = T.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_sum():
    out = T.conv2d(t64(np.ones((1, 3, 3))), t64(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_shapes_and_grads(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    assert T.conv2d(t64(x[0]), t64(w)).shape == (4, 3, 3)
    assert T.conv2d(t64(x), t64(w)).shape == (2, 4, 3, 3)
    assert check_op_grads(lambda a, b: T.conv2d(a, b), [x, w]) < 1e-4


@pytest.mark.parametrize("stride,padding", [(2, 1), (1, 1), (3, 0)])
def test_conv_stride_padding_grads(rng, stride, padding):
    x = rng.standard_normal((2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 2))
    out = T.conv2d(t64(x), t64(w), stride, padding)
    assert out.shape == (3, (7 + 2 * padding - 3) // stride + 1, (6 + 2 * padding - 2) // stride + 1)
    assert check_op_grads(lambda a, b: T.conv2d(a, b, stride, padding), [x, w]) < 1e-4


def test_conv_matches_direct_loops(rng):
    x = rng.standard_normal((2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(t64(x), t64(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                ref[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(t64(np.ones((1, 2, 2))), t64(np.ones((1, 1, 3, 3))))


# -- bilinear ----------------------------------------------------------------

def test_resize_identity(rng):
    x = rng.standard_normal((5, 21, 21)).astype(np.float32)
    out = T.bilinear_resize(Tensor(x), 21, 21)
    assert out.data.tobytes() == x.tobytes()


@pytest.mark.parametrize("size", [(1, 1), (4, 9), (21, 21), (40, 17)])
def test_resize_constant(size):
    x = np.full((3, 9, 13), 0.1)
    out = T.bilinear_resize(t64(x), *size)
    assert np.all(out.data == 0.1)


def test_resize_half_pixel_hand_values():
    # centres of 4 outputs over 2 inputs sit at -0.25, 0.25, 0.75, 1.25 (clamped)
    out = T.bilinear_resize(t64([[[0.0, 1.0]]]), 1, 4)
    np.testing.assert_allclose(out.data[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30), st.integers(1, 30))
def test_resize_stays_in_range(seed, oh, ow):
    x = np.random.default_rng(seed).standard_normal((4, 9, 9))
    out = T.bilinear_resize(t64(x), oh, ow).data
    assert out.min() >= x.min() and out.max() <= x.max()


def test_resize_9_to_21_in_range(rng):
    x = rng.random((8, 9, 9))
    out = T.bilinear_resize(t64(x), 21, 21).data
    assert out.shape == (8, 21, 21)
    assert x.min() <= out.min() and out.max() <= x.max()


@pytest.mark.parametrize("src,dst", [((9, 9), (21, 21)), ((33, 33), (21, 21)), ((5, 7), (3, 11))])
def test_resize_grads(rng, src, dst):
    x = rng.standard_normal((2, *src))
    assert check_op_grads(lambda a: T.bilinear_resize(a, *dst), [x]) < 1e-4


# -- layer norm --------------------------------------------------------------

def ln(x, eps=1e-5):
    D = np.shape(x)[-1]
    return T.layer_norm(t64(x), t64(np.ones(D)), t64(np.zeros(D)), eps)


def test_layer_norm_constant_row_is_zero():
    np.testing.assert_array_equal(ln([[1.0, 1.0, 1.0]]).data, [[0.0, 0.0, 0.0]])


def test_layer_norm_unit_variance_row():
    out = ln([[-1.0, 1.0]]).data
    np.testing.assert_allclose(out, np.array([[-1.0, 1.0]]) / np.sqrt(1 + 1e-5), rtol=1e-14)


def test_layer_norm_row_statistics(rng):
    out = ln(rng.standard_normal((4, 8)) * 3 + 2).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1).max() < 1e-3


def test_layer_norm_errors():
    with pytest.raises(DimensionError):
        T.layer_norm(t64(np.ones((2, 0))), t64(np.ones(0)), t64(np.zeros(0)))
    with pytest.raises(DimensionError):
        T.layer_norm(t64(np.ones((2, 3))), t64(np.ones(2)), t64(np.zeros(2)))


def test_layer_norm_grads(rng):
    args = [rng.standard_normal((2, 3, 6)), rng.standard_normal(6), rng.standard_normal(6)]
    assert check_op_grads(lambda x, g, b: T.layer_norm(x, g, b, 1e-5), args) < 1e-4


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(t64([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-15)


def test_softmax_no_overflow():
    out = T.softmax(t64([1000.0, 0.0])).data
    assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    out = T.softmax(t64([row, row[::-1]])).data
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


def test_softmax_grads(rng):
    assert check_op_grads(T.softmax, [rng.standard_normal((3, 5))]) < 1e-4


# -- elementwise -------------------------------------------------------------

def test_sub_self_exactly_zero(rng):
    x = t64(rng.standard_normal((4, 5)))
    assert np.all(T.sub(x, x).data == 0)


def test_relu_values_and_subgradient():
    np.testing.assert_array_equal(T.relu(t64([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = t64([-1.0, 2.0], True)
    T.sum_(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0, 1])
    z = t64([0.0], True)
    T.sum_(T.relu(z)).backward()
    assert z.grad[0] == 0.0


def test_scalar_broadcast_and_shape_errors(rng):
    x = t64(rng.standard_normal((2, 3)), True)
    s = t64(2.0, True)
    T.sum_(T.mul(x, s)).backward()
    np.testing.assert_allclose(x.grad, 2.0)
    assert s.grad.shape == () and np.isclose(s.grad, x.data.sum())
    with pytest.raises(DimensionError):
        T.add(t64(np.ones((2, 3))), t64(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        T.add(t64(np.ones((2, 3))), t64(np.ones(3)))


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_binary_grads(rng, op):
    assert check_op_grads(op, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]) < 1e-4
    assert check_op_grads(op, [rng.standard_normal((3, 4)), rng.standard_normal(())]) < 1e-4


def test_unary_and_shape_op_grads(rng):
    x = rng.standard_normal((2, 3, 4))
    assert check_op_grads(lambda a: T.scale(a, -0.7), [x]) < 1e-4
    assert check_op_grads(T.relu, [x]) < 1e-4
    assert check_op_grads(T.abs_, [x]) < 1e-4
    assert check_op_grads(lambda a: T.transpose(a, (2, 0, 1)), [x]) < 1e-4
    assert check_op_grads(lambda a: T.reshape(a, (6, 4)), [x]) < 1e-4
    assert check_op_grads(lambda a: T.broadcast_to(a, (5, 2, 3, 4)), [x]) < 1e-4
    assert check_op_grads(lambda a: T.index(a, (..., 0, slice(None))), [x]) < 1e-4
    assert check_op_grads(lambda a, b: T.concat([a, b], axis=1), [x, rng.standard_normal((2, 1, 4))]) < 1e-4
    assert check_op_grads(lambda a: T.mean(a, axis=1), [x]) < 1e-4


# -- backward ----------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = t64(rng.standard_normal((3, 2)), True)
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_square():
    x = t64([1.0, 2.0, 3.0], True)
    T.sum_(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_backward_accumulates_over_consumers():
    x = t64([1.0, -2.0], True)
    y = T.add(T.scale(x, 3.0), T.mul(x, x))
    T.sum_(T.add(y, x)).backward()
    np.testing.assert_array_equal(x.grad, 3 + 2 * x.data + 1)


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        T.backward(T.scale(t64([1.0, 2.0], True), 2.0))


def test_deep_graph_does_not_recurse():
    x = t64([1.0], True)
    y = x
    for _ in range(5000):
        y = T.add(y, x)
    T.sum_(y).backward()
    assert x.grad[0] == 5001


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_detected():
    with pytest.raises(NonFiniteError):
        T.mul(t64([1e300]), t64([1e300]))


def test_ops_bit_deterministic(rng):
    q = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
    w = rng.standard_normal((6, 4, 3, 3)).astype(np.float32)

    def run():
        y = T.bilinear_resize(T.relu(T.conv2d(Tensor(q), Tensor(w), 2, 1)), 7, 5)
        return T.softmax(T.reshape(y, (2, 6, 35))).data.tobytes()

    assert run() == run()


# -- finite differences ------------------------------------------------------

def test_finite_diff_of_sum(rng):
    x = t64(rng.standard_normal((2, 3)))
    np.testing.assert_allclose(finite_diff_grad(T.sum_, x, 1e-4), 1.0, atol=1e-8)


def test_finite_diff_of_square():
    g = finite_diff_grad(lambda t: T.sum_(T.mul(t, t)), t64([3.0]), 1e-4)
    assert abs(g[0] - 6.0) < 1e-6


def test_default_dtype_switch():
    assert Tensor([1.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
