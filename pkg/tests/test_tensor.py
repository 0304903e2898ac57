"""Autodiff primitives: forward semantics and gradient correctness."""

import numpy as np
import pytest

from timbrecast import tensor as T
from timbrecast.tensor import Tensor, ShapeError, no_grad, using_dtype

from gradcheck import finite_diff_check, leaf

RNG = np.random.default_rng(1234)


def test_matmul_against_naive_loops():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((7, 5))
    b = rng.standard_normal((5, 3))
    expected = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a), Tensor(b)).data
    assert np.abs(got - expected).max() < 1e-6


def test_matmul_shape_error_names_dims():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_conv1d_identity_kernel_preserves_input():
    x = Tensor(RNG.standard_normal((2, 3, 11)).astype(np.float32))
    w = np.zeros((3, 3, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0] = 1.0
    out = T.conv1d(x, Tensor(w), stride=1, pad=0)
    assert np.array_equal(out.data, x.data)


def test_conv1d_reports_channel_mismatch():
    x = Tensor(np.zeros((1, 3, 8), dtype=np.float32))
    w = Tensor(np.zeros((4, 2, 3), dtype=np.float32))
    with pytest.raises(ShapeError, match="conv1d"):
        T.conv1d(x, w)


def test_group_norm_single_group_standardizes():
    x = Tensor(RNG.standard_normal((4, 6, 10)).astype(np.float32) * 3 + 1)
    out = T.group_norm(x, num_groups=1).data
    flat = out.reshape(4, -1)
    assert np.abs(flat.mean(axis=1)).max() < 1e-5
    assert np.abs(flat.var(axis=1) - 1.0).max() < 1e-4


def test_group_norm_rejects_bad_group_count():
    with pytest.raises(ShapeError, match="group_norm"):
        T.group_norm(Tensor(np.zeros((1, 5, 4), dtype=np.float32)), num_groups=2)


def test_product_rule_simple():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = Tensor(np.array(4.0), requires_grad=True)
    out = T.mul(x, y)
    out.backward()
    assert x.grad == pytest.approx(4.0)
    assert y.grad == pytest.approx(3.0)


def test_latent_penalty_gradient_is_piecewise():
    # max(0, |z| - 1): zero gradient strictly inside the unit box, +/-1 outside
    for z0, expect in [(0.5, 0.0), (1.5, 1.0), (-2.0, -1.0)]:
        z = Tensor(np.array([z0]), requires_grad=True)
        penalty = T.tsum(T.relu(T.absolute(z) - Tensor(np.array(1.0))))
        penalty.backward()
        assert z.grad[0] == pytest.approx(expect)


def test_stop_gradient_blocks_flow():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = T.stop_gradient(T.mul(x, x))
    loss = T.tsum(T.mul(y, Tensor(np.array([1.0, 1.0]))))
    loss.backward()
    assert x.grad is None


def test_no_grad_skips_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_softmax_rows_sum_to_one():
    x = Tensor(RNG.standard_normal((5, 9)).astype(np.float32) * 4)
    s = T.softmax(x, axis=-1).data
    assert np.abs(s.sum(axis=-1) - 1.0).max() < 1e-6
    assert (s >= 0).all()


def test_attention_output_in_value_hull():
    # every output row is a convex combination of value rows
    q = Tensor(RNG.standard_normal((2, 6, 4)))
    k = Tensor(RNG.standard_normal((2, 6, 4)))
    v = Tensor(RNG.standard_normal((2, 6, 4)))
    out = T.attention(q, k, v).data
    lo = v.data.min(axis=1, keepdims=True)
    hi = v.data.max(axis=1, keepdims=True)
    assert (out >= lo - 1e-6).all() and (out <= hi + 1e-6).all()


def test_upsample_then_crop_lengths():
    x = Tensor(RNG.standard_normal((1, 2, 5)).astype(np.float32))
    up = T.upsample_nearest(x, 2)
    assert up.shape == (1, 2, 10)
    assert np.array_equal(up.data[:, :, ::2], x.data)
    cropped = T.crop1d(up, 0, 9)
    assert cropped.shape == (1, 2, 9)


def test_forward_is_bit_deterministic():
    x = RNG.standard_normal((3, 8, 20)).astype(np.float32)
    w = RNG.standard_normal((6, 8, 3)).astype(np.float32)
    a = T.conv1d(Tensor(x), Tensor(w), stride=1, pad=1).data
    b = T.conv1d(Tensor(x), Tensor(w), stride=1, pad=1).data
    assert np.array_equal(a, b)


def test_time_interp_endpoints_fixed():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(1, 2, 6))
    out = T.time_interp(x, 11).data
    assert out[0, 0, 0] == x.data[0, 0, 0]
    assert out[0, 0, -1] == x.data[0, 0, -1]


class TestGradients:
    """Central finite differences on every primitive, float64."""

    def setup_method(self):
        self.rng = np.random.default_rng(99)

    def check(self, fn, leaves):
        with using_dtype(np.float64):
            finite_diff_check(fn, leaves, self.rng)

    def test_add_broadcast(self):
        a, b = leaf(self.rng, 3, 4), leaf(self.rng, 1, 4)
        self.check(lambda: T.tsum(T.mul(T.add(a, b), T.add(a, b))), [a, b])

    def test_sub_div(self):
        a, b = leaf(self.rng, 5), leaf(self.rng, 5, scale=0.5)
        b.data += 2.0
        self.check(lambda: T.tsum(T.div(T.sub(a, b), b)), [a, b])

    def test_matmul_2d(self):
        a, b = leaf(self.rng, 4, 6), leaf(self.rng, 6, 3)
        self.check(lambda: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b])

    def test_matmul_batched(self):
        a, b = leaf(self.rng, 2, 4, 5), leaf(self.rng, 2, 5, 3)
        self.check(lambda: T.tsum(T.matmul(a, b)), [a, b])

    def test_matmul_broadcast_rhs(self):
        a, b = leaf(self.rng, 2, 4, 5), leaf(self.rng, 5, 3)
        self.check(lambda: T.mse(T.matmul(a, b), Tensor(np.zeros((2, 4, 3)))), [a, b])

    @pytest.mark.parametrize("stride,pad,kernel", [(1, 1, 3), (2, 2, 5), (4, 4, 9), (1, 0, 1)])
    def test_conv1d(self, stride, pad, kernel):
        x, w = leaf(self.rng, 2, 3, 14), leaf(self.rng, 4, 3, kernel)
        b = leaf(self.rng, 4)
        self.check(
            lambda: T.mse(
                T.conv1d(x, w, bias=b, stride=stride, pad=pad),
                Tensor(np.zeros(T.conv1d(x, w, bias=b, stride=stride, pad=pad).shape)),
            ),
            [x, w, b],
        )

    def test_upsample_nearest(self):
        x = leaf(self.rng, 2, 3, 6)
        self.check(lambda: T.tsum(T.mul(T.upsample_nearest(x, 3), T.upsample_nearest(x, 3))), [x])

    def test_linear(self):
        x, w, b = leaf(self.rng, 5, 7), leaf(self.rng, 4, 7), leaf(self.rng, 4)
        self.check(lambda: T.tsum(T.mul(T.linear(x, w, b), T.linear(x, w, b))), [x, w, b])

    def test_group_norm(self):
        x = leaf(self.rng, 2, 6, 5)
        self.check(lambda: T.tsum(T.mul(T.group_norm(x, 3), Tensor(self.fixed((2, 6, 5))))), [x])

    def fixed(self, shape):
        return np.random.default_rng(5).standard_normal(shape)

    def test_silu(self):
        x = leaf(self.rng, 4, 4)
        self.check(lambda: T.tsum(T.silu(x)), [x])

    def test_relu_abs(self):
        x = leaf(self.rng, 40)
        self.check(lambda: T.tsum(T.relu(T.absolute(x) - Tensor(np.array(0.3)))), [x])

    def test_sqrt_log(self):
        x = leaf(self.rng, 12)
        x.data = np.abs(x.data) + 0.5
        self.check(lambda: T.tsum(T.log(T.sqrt(x))), [x])

    def test_softmax(self):
        x = leaf(self.rng, 3, 7)
        probe = Tensor(self.fixed((3, 7)))
        self.check(lambda: T.tsum(T.mul(T.softmax(x), probe)), [x])

    def test_attention(self):
        q, k, v = leaf(self.rng, 1, 5, 4), leaf(self.rng, 1, 5, 4), leaf(self.rng, 1, 5, 4)
        probe = Tensor(self.fixed((1, 5, 4)))
        self.check(lambda: T.tsum(T.mul(T.attention(q, k, v), probe)), [q, k, v])

    def test_reductions(self):
        x = leaf(self.rng, 3, 4, 5)
        self.check(lambda: T.tsum(T.mul(T.tmean(x, axis=2), T.tmean(x, axis=2))), [x])
        self.check(lambda: T.tsum(T.mul(T.tsum(x, axis=(0, 2)), T.tsum(x, axis=(0, 2)))), [x])

    def test_concat(self):
        a, b = leaf(self.rng, 2, 3, 4), leaf(self.rng, 2, 5, 4)
        probe = Tensor(self.fixed((2, 8, 4)))
        self.check(lambda: T.tsum(T.mul(T.concat([a, b], axis=1), probe)), [a, b])

    def test_reshape_transpose(self):
        x = leaf(self.rng, 2, 3, 4)
        probe = Tensor(self.fixed((4, 6)))
        self.check(
            lambda: T.tsum(T.mul(T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)), probe)), [x]
        )

    def test_crop1d(self):
        x = leaf(self.rng, 2, 3, 10)
        probe = Tensor(self.fixed((2, 3, 6)))
        self.check(lambda: T.tsum(T.mul(T.crop1d(x, 2, 8), probe)), [x])

    def test_time_interp(self):
        x = leaf(self.rng, 2, 3, 9)
        probe = Tensor(self.fixed((2, 3, 14)))
        self.check(lambda: T.tsum(T.mul(T.time_interp(x, 14), probe)), [x])

    def test_rfft_mag(self):
        for n in (8, 9):
            x = leaf(self.rng, 3, n)
            probe = Tensor(self.fixed((3, n // 2 + 1)))
            self.check(lambda: T.tsum(T.mul(T.rfft_mag(x), probe)), [x])

    def test_scale_shift(self):
        x = leaf(self.rng, 2, 4, 6)
        s, t = leaf(self.rng, 2, 4, 1), leaf(self.rng, 2, 4, 1)
        self.check(lambda: T.mse(T.scale_shift(x, s, t), Tensor(np.zeros((2, 4, 6)))), [x, s, t])

    def test_losses(self):
        a, b = leaf(self.rng, 3, 5), leaf(self.rng, 3, 5)
        self.check(lambda: T.mse(a, b), [a, b])
        self.check(lambda: T.mae(a, b), [a, b])

    def test_reused_node_accumulates(self):
        x = leaf(self.rng, 6)
        self.check(lambda: T.tsum(T.mul(x, x)), [x])
