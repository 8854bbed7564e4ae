"""Value and gradient oracles for the reverse-mode array engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from factorcast import autodiff as ad
from factorcast.autodiff import Node, NonFiniteError, ShapeError

from conftest import check_op_grad


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

class TestForwardValues:
    def test_causal_conv_running_sum(self):
        # all-ones kernel of width 3 turns [1,2,3] into prefix sums
        x = Node(np.array([[1.0, 2.0, 3.0]]))
        w = Node(np.ones((1, 1, 3)))
        out = ad.conv1d(x, w)
        np.testing.assert_allclose(out.value, [[1.0, 3.0, 6.0]])

    def test_conv_dilated_taps(self):
        # width-3 kernel at dilation 5 reads offsets {0, -5, -10}
        T = 16
        w = Node(rnd(1, 1, 3, seed=3))
        for hot in range(T):
            x = np.zeros((1, T))
            x[0, hot] = 1.0
            out = ad.conv1d(Node(x), w, dilation=5).value[0]
            influenced = set(np.nonzero(out)[0])
            expected = {t for t in (hot, hot + 5, hot + 10) if t < T}
            assert influenced <= expected

    def test_conv_output_length_matches_input(self):
        for k, r in [(1, 1), (3, 1), (3, 5), (5, 2)]:
            x = Node(rnd(2, 30, seed=1))
            w = Node(rnd(4, 2, k, seed=2))
            assert ad.conv1d(x, w, dilation=r).shape == (4, 30)

    def test_conv_batched(self):
        x = rnd(3, 2, 10, seed=5)
        w = rnd(4, 2, 3, seed=6)
        b = rnd(4, seed=7)
        out = ad.conv1d(Node(x), Node(w), Node(b), dilation=2)
        assert out.shape == (3, 4, 10)
        single = ad.conv1d(Node(x[1]), Node(w), Node(b), dilation=2)
        np.testing.assert_allclose(out.value[1], single.value, atol=1e-12)

    def test_softmax_uniform(self):
        out = ad.softmax(Node(np.zeros(2)))
        np.testing.assert_allclose(out.value, [0.5, 0.5])

    def test_softmax_shift_invariant(self):
        x = rnd(5, seed=8)
        a = ad.softmax(Node(x)).value
        b = ad.softmax(Node(x + 123.0)).value
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_elementwise_values(self):
        x = np.array([0.0, 1.0, -1.0])
        np.testing.assert_allclose(ad.tanh(Node(x)).value, np.tanh(x))
        np.testing.assert_allclose(ad.sigmoid(Node(x)).value, 1 / (1 + np.exp(-x)))
        np.testing.assert_allclose(ad.relu(Node(x)).value, [0.0, 1.0, 0.0])
        np.testing.assert_allclose(ad.exp(Node(x)).value, np.exp(x))

    def test_frobenius_norm(self):
        x = np.array([[3.0, 0.0], [0.0, 4.0]])
        assert ad.frobenius_norm(Node(x)).value == pytest.approx(5.0)

    def test_matmul_matches_numpy(self):
        a, b = rnd(3, 4, seed=1), rnd(4, 5, seed=2)
        np.testing.assert_allclose((Node(a) @ Node(b)).value, a @ b)

    def test_numpy_defers_to_node(self):
        # ndarray <op> Node must hit the reflected operator, not broadcast
        # the Node as an object scalar
        x = np.array([1.0, 2.0])
        out = x + Node(np.array([10.0, 20.0]))
        assert isinstance(out, Node)
        np.testing.assert_allclose(out.value, [11.0, 22.0])
        out = np.float64(3.0) * Node(np.array([1.0, 2.0]))
        assert isinstance(out, Node)
        np.testing.assert_allclose(out.value, [3.0, 6.0])


# ---------------------------------------------------------------------------
# gradients, op by op
# ---------------------------------------------------------------------------

class TestGradients:
    def test_add_broadcast(self):
        check_op_grad(lambda a, b: a + b, rnd(3, 4, seed=1), rnd(1, 4, seed=2))

    def test_sub(self):
        check_op_grad(lambda a, b: a - b, rnd(2, 3, seed=1), rnd(2, 3, seed=2))

    def test_mul_broadcast(self):
        check_op_grad(lambda a, b: a * b, rnd(2, 3, seed=3), rnd(3, seed=4))

    def test_div(self):
        b = rnd(2, 3, seed=5)
        b += np.sign(b) + (b == 0)  # keep denominators away from zero
        check_op_grad(lambda a, c: a / c, rnd(2, 3, seed=6), b)

    def test_scalar_ops(self):
        check_op_grad(lambda a: 2.5 * a - 1.0 + a / 3.0, rnd(4, seed=7))

    def test_neg(self):
        check_op_grad(lambda a: -a, rnd(3, seed=8))

    def test_pow_const(self):
        x = np.abs(rnd(4, seed=9)) + 0.5
        check_op_grad(lambda a: a ** 0.25, x)

    def test_matmul(self):
        check_op_grad(ad.matmul, rnd(3, 4, seed=1), rnd(4, 2, seed=2))

    def test_matmul_batched(self):
        check_op_grad(ad.matmul, rnd(2, 3, 4, seed=3), rnd(2, 4, 5, seed=4))

    def test_matmul_broadcast_weight(self):
        check_op_grad(ad.matmul, rnd(3, 4, seed=5), rnd(5, 4, 2, seed=6))

    def test_tanh(self):
        check_op_grad(ad.tanh, rnd(3, 3, seed=1))

    def test_sigmoid(self):
        check_op_grad(ad.sigmoid, rnd(5, seed=2))

    def test_exp(self):
        check_op_grad(ad.exp, rnd(4, seed=3))

    def test_log(self):
        check_op_grad(ad.log, np.abs(rnd(4, seed=4)) + 0.5)

    def test_sqrt(self):
        check_op_grad(ad.sqrt, np.abs(rnd(4, seed=5)) + 0.5)

    def test_relu(self):
        x = rnd(6, seed=6)
        x += np.sign(x) * 0.1  # stay clear of the kink
        check_op_grad(ad.relu, x)

    def test_square(self):
        check_op_grad(ad.square, rnd(3, 2, seed=7))

    def test_softmax(self):
        check_op_grad(lambda a: ad.softmax(a, axis=-1), rnd(3, 4, seed=8))

    def test_softmax_axis0(self):
        check_op_grad(lambda a: ad.softmax(a, axis=0), rnd(4, 2, seed=9))

    def test_reduce_sum_all(self):
        check_op_grad(ad.reduce_sum, rnd(3, 4, seed=1))

    def test_reduce_sum_axis_tuple(self):
        check_op_grad(lambda a: ad.reduce_sum(a, axis=(1, 2)), rnd(2, 3, 4, seed=2))

    def test_reduce_mean(self):
        check_op_grad(lambda a: ad.reduce_mean(a, axis=0), rnd(3, 4, seed=3))

    def test_frobenius(self):
        check_op_grad(ad.frobenius_norm, rnd(3, 3, seed=4) + 2.0)

    def test_concat(self):
        check_op_grad(lambda a, b: ad.concat([a, b], axis=1),
                      rnd(2, 3, seed=5), rnd(2, 4, seed=6))

    def test_getitem_slice(self):
        check_op_grad(lambda a: a[1:3, ::2], rnd(4, 6, seed=7))

    def test_getitem_fancy(self):
        idx = np.array([0, 2, 2])  # repeated index must accumulate
        check_op_grad(lambda a: a[idx], rnd(4, 3, seed=8))

    def test_take(self):
        idx = np.array([1, 1, 4, 0])
        check_op_grad(lambda a: ad.take(a, idx, axis=1), rnd(2, 5, 3, seed=9))

    def test_transpose(self):
        check_op_grad(lambda a: ad.transpose(a, (2, 0, 1)), rnd(2, 3, 4, seed=1))

    def test_reshape(self):
        check_op_grad(lambda a: ad.reshape(a, (6, 2)), rnd(3, 4, seed=2))

    def test_linear(self):
        check_op_grad(ad.linear, rnd(5, 3, seed=3), rnd(3, 2, seed=4),
                      rnd(2, seed=5))

    @pytest.mark.parametrize("dilation", [1, 2, 5])
    def test_conv1d(self, dilation):
        check_op_grad(lambda x, w, b: ad.conv1d(x, w, b, dilation=dilation),
                      rnd(2, 12, seed=1), rnd(3, 2, 3, seed=2), rnd(3, seed=3))

    def test_conv1d_batched(self):
        check_op_grad(lambda x, w, b: ad.conv1d(x, w, b, dilation=2),
                      rnd(2, 2, 10, seed=4), rnd(3, 2, 3, seed=5),
                      rnd(3, seed=6))

    def test_diamond_graph_exact(self):
        # z = x*y + x: dz/dx = y + 1, dz/dy = x, both exact
        x = Node(np.array([2.0, -3.0]))
        y = Node(np.array([5.0, 7.0]))
        z = ad.reduce_sum(x * y + x)
        ad.backward(z)
        np.testing.assert_allclose(x.grad, [6.0, 8.0])
        np.testing.assert_allclose(y.grad, [2.0, -3.0])

    def test_shared_subexpression(self):
        x = Node(np.array([1.5]))
        s = ad.tanh(x)
        out = ad.reduce_sum(s * s)
        ad.backward(out)
        t = np.tanh(1.5)
        np.testing.assert_allclose(x.grad, [2 * t * (1 - t * t)], atol=1e-12)


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------

class TestBackwardMechanics:
    def test_accumulates_across_calls(self):
        x = Node(np.array([1.0, 2.0]))
        y = ad.reduce_sum(x * x)
        ad.backward(y)
        first = x.grad.copy()
        ad.backward(y)
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_zero_grads(self):
        x = Node(np.array([3.0]))
        y = ad.reduce_sum(x * x)
        ad.backward(y)
        assert np.any(x.grad != 0)
        ad.zero_grads([x])
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_backward_requires_scalar(self):
        x = Node(np.ones(3))
        with pytest.raises(ShapeError):
            ad.backward(x * 2.0)

    def test_deep_chain_no_recursion_limit(self):
        x = Node(np.array(1.0))
        y = x
        for _ in range(5000):
            y = y * 1.0001
        ad.backward(y)
        assert np.isfinite(x.grad)

    def test_grad_starts_at_zero(self):
        x = Node(np.array([1.0]))
        np.testing.assert_array_equal(x.grad, [0.0])


# ---------------------------------------------------------------------------
# error handling
# ---------------------------------------------------------------------------

class TestErrors:
    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            Node(np.zeros((2, 2, 2, 2)))

    def test_non_finite_leaf(self):
        with pytest.raises(NonFiniteError):
            Node(np.array([1.0, np.nan]))

    def test_non_finite_result(self):
        with np.errstate(all="ignore"):
            with pytest.raises(NonFiniteError):
                ad.log(Node(np.array([-1.0])))
            with pytest.raises(NonFiniteError):
                Node(np.array([1.0])) / Node(np.array([0.0]))
            with pytest.raises(NonFiniteError):
                ad.exp(Node(np.array([1000.0])))

    def test_matmul_shape_mismatch(self):
        with pytest.raises((ShapeError, ValueError)):
            ad.matmul(Node(np.zeros((2, 3))), Node(np.zeros((4, 2))))

    def test_concat_empty(self):
        with pytest.raises(ValueError):
            ad.concat([], axis=0)

    def test_sqrt_negative(self):
        with pytest.raises(NonFiniteError):
            ad.sqrt(Node(np.array([-4.0])))


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

finite_rows = arrays(np.float64, (3, 4),
                     elements=st.floats(-30, 30, allow_nan=False))


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(finite_rows)
    def test_softmax_simplex(self, x):
        out = ad.softmax(Node(x), axis=1).value
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=1), np.ones(3), atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(finite_rows)
    def test_reduce_sum_matches_numpy(self, x):
        np.testing.assert_allclose(ad.reduce_sum(Node(x), axis=0).value,
                                   x.sum(axis=0), atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(finite_rows)
    def test_broadcast_grad_shape(self, x):
        # bias of shape (1, 4) added across rows: grad collapses by sum
        b = Node(np.zeros((1, 4)))
        out = ad.reduce_sum(Node(x) + b)
        ad.backward(out)
        assert b.grad.shape == (1, 4)
        np.testing.assert_allclose(b.grad, np.full((1, 4), 3.0))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_scatter_adjoint_preserves_mass(self, seed):
        rng = np.random.default_rng(seed)
        x = Node(rng.standard_normal((5, 3)))
        idx = rng.integers(0, 5, size=6)
        out = ad.reduce_sum(ad.take(x, idx, axis=0))
        ad.backward(out)
        counts = np.bincount(idx, minlength=5).astype(float)
        np.testing.assert_allclose(x.grad, np.tile(counts[:, None], (1, 3)))
