import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from smanet import tensor as T
from smanet.errors import NumericError, ShapeError
from smanet.tensor import Tensor


def rnd(seed):
    return np.random.default_rng(seed)


class TestConv2d:
    def test_scaling_kernel(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor([[[[2.0]]]]), Tensor([0.0]))
        assert np.array_equal(out.data, np.full((1, 1, 2, 2), 2.0))

    def test_identity_kernel(self):
        x = rnd(0).normal(size=(2, 1, 4, 5))
        out = T.conv2d(Tensor(x), Tensor([[[[1.0]]]]), Tensor([0.0]))
        assert np.array_equal(out.data, x)

    def test_matches_loop_oracle(self):
        rng = rnd(1)
        x = rng.normal(size=(1, 1, 5, 5))
        w = rng.normal(size=(1, 1, 3, 3))
        b = rng.normal(size=1)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
        assert np.allclose(got.data, oracles.conv2d_loop(x, w, b, 1, 1), atol=1e-12)

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 1), (2, 0, 1), (1, 1, 3), (2, 1, 3), (1, 3, 7), (2, 3, 7)])
    def test_strides_and_padding(self, stride, padding, k):
        rng = rnd(10 * stride + k)
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        assert np.allclose(got.data, oracles.conv2d_loop(x, w, b, stride, padding), atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


class TestDepthwise:
    def test_equals_per_channel_conv2d_composition(self):
        rng = rnd(2)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(3, 5, 5))
        b = rng.normal(size=3)
        got = T.depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b), padding=2)
        for n in range(3):
            single = T.conv2d(
                Tensor(x[:, n : n + 1]), Tensor(w[n][None, None]), Tensor(b[n : n + 1]), padding=2
            )
            assert np.allclose(got.data[:, n], single.data[:, 0], atol=1e-10)

    def test_matches_loop_oracle(self):
        rng = rnd(3)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(2, 3, 3))
        b = rng.normal(size=2)
        got = T.depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
        assert np.allclose(got.data, oracles.depthwise_loop(x, w, b, 1), atol=1e-12)


class TestSigmoid:
    def test_symmetry_point(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_saturation(self):
        assert abs(T.sigmoid(Tensor(100.0)).item() - 1.0) < 1e-12

    def test_gradient_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        T.sigmoid(x).backward()
        assert abs(float(x.grad) - 0.25) < 1e-12

    def test_strictly_inside_unit_interval_up_to_36(self):
        x = np.array([-36.0, -10.0, 0.0, 10.0, 36.0])
        y = T.sigmoid(Tensor(x)).data
        assert np.all(y > 0.0) and np.all(y < 1.0)

    def test_stable_at_extremes(self):
        y = T.sigmoid(Tensor(np.array([-1e3, 1e3]))).data
        assert np.all(np.isfinite(y))


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([3.7, 3.7, 3.7]), axis=0)
        assert np.allclose(out.data, 1 / 3, atol=1e-12)

    def test_log2_case(self):
        out = T.softmax(Tensor([0.0, np.log(2.0)]), axis=0)
        assert np.allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-500, 500), min_size=2, max_size=8),
           st.floats(-100, 100))
    def test_shift_invariance_and_normalization(self, xs, c):
        x = np.array(xs)
        a = T.softmax(Tensor(x), axis=0).data
        b = T.softmax(Tensor(x + c), axis=0).data
        assert np.allclose(a, b, atol=1e-12)
        assert abs(a.sum() - 1.0) < 1e-9


class TestAvgPool:
    def test_constant(self):
        out = T.avg_pool(Tensor(np.full((2, 3, 4, 4), 2.5)), axes=(2, 3))
        assert np.allclose(out.data, 2.5, atol=0)

    def test_two_by_two(self):
        out = T.avg_pool(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), axes=(0, 1))
        assert out.item() == 2.5

    def test_matches_loop_oracle(self):
        x = rnd(4).normal(size=(2, 3, 4, 5))
        got = T.avg_pool(Tensor(x), axes=(2, 3))
        assert np.allclose(got.data, oracles.avg_pool_loop(x, (2, 3)), atol=1e-12)


class TestLinear:
    def test_identity(self):
        x = rnd(5).normal(size=(3, 4))
        out = T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.array_equal(out.data, x)

    def test_zero_weight_bias_rows(self):
        v = np.array([1.0, -2.0])
        out = T.linear(Tensor(np.ones((3, 4))), Tensor(np.zeros((2, 4))), Tensor(v))
        assert np.array_equal(out.data, np.tile(v, (3, 1)))

    def test_matches_loop_oracle(self):
        rng = rnd(6)
        x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
        got = T.linear(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(got.data, oracles.linear_loop(x, w, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


class TestElementwise:
    def test_mul_identity(self):
        x = rnd(7).normal(size=(3, 4))
        assert np.array_equal(T.mul(Tensor(x), Tensor(np.ones((3, 4)))).data, x)

    def test_broadcast_mask_halves_channels(self):
        x = rnd(8).normal(size=(3, 2, 2))
        out = T.mul(Tensor(np.full((1, 2, 2), 0.5)), Tensor(x))
        assert np.allclose(out.data, 0.5 * x, atol=0)

    def test_hinge_piecewise(self):
        out = T.hinge_sub(Tensor([0.2, 0.7]), 0.5)
        assert np.allclose(out.data, [0.0, 0.2], atol=1e-15)

    def test_non_broadcastable(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


class TestReductionsAndShapes:
    def test_reduce_max_routes_ties_to_lowest_index(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        T.reduce_max(x, axis=1).sum().backward()
        assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_exclusive_channel_max_matches_loop(self):
        x = rnd(9).random((2, 4, 3, 3))
        got = T.exclusive_channel_max(Tensor(x))
        assert np.allclose(got.data, oracles.exclusive_max_loop(x), atol=0)

    def test_masked_avg_pool_matches_primitive_composition(self):
        rng = rnd(10)
        f = Tensor(rng.normal(size=(2, 3, 4, 4)))
        m = Tensor(rng.random((2, 2, 4, 4)))
        fused = T.masked_avg_pool(f, m)
        for n in range(2):
            composed = T.avg_pool(T.mul(T.narrow(m, 1, n, 1), f), axes=(2, 3))
            assert np.allclose(fused.data[:, n], composed.data[:, :, 0, 0], atol=1e-12)

    def test_narrow_concat_stack_roundtrip(self):
        x = rnd(11).normal(size=(2, 5))
        t = Tensor(x)
        parts = [T.narrow(t, 1, i, 1) for i in range(5)]
        assert np.array_equal(T.concat(parts, axis=1).data, x)
        assert T.stack([t, t], axis=0).shape == (2, 2, 5)

    def test_max_pool_matches_naive(self):
        x = rnd(12).normal(size=(1, 2, 6, 6))
        got = T.max_pool2d(Tensor(x), 2, 2, 0).data
        want = x.reshape(1, 2, 3, 2, 3, 2).max(axis=(3, 5))
        assert np.array_equal(got, want)


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        rng = rnd(13)
        x = rng.normal(loc=3.0, scale=2.0, size=(8, 4, 5, 5))
        rm, rv = np.zeros(4), np.ones(4)
        out = T.batch_norm2d(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, training=True)
        assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        assert np.allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
        assert not np.allclose(rm, 0.0)

    def test_eval_uses_running_stats(self):
        x = rnd(14).normal(size=(2, 3, 4, 4))
        rm, rv = np.full(3, 1.5), np.full(3, 4.0)
        out = T.batch_norm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv,
                             training=False, eps=0.0)
        assert np.allclose(out.data, (x - 1.5) / 2.0, atol=1e-12)


class TestDeterminismAndChecks:
    def test_forward_bit_identical(self):
        rng = rnd(15)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
        b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
        assert np.array_equal(a, b)

    def test_checked_mode_flags_nonfinite(self):
        T.set_checked(True)
        try:
            with pytest.raises(NumericError):
                T.log(Tensor([0.0]))
        finally:
            T.set_checked(False)

    def test_numpy_fallback_matches_jit_kernels(self, monkeypatch):
        from smanet import _kernels

        rng = rnd(16)
        x = rng.normal(size=(2, 3, 7, 7)).astype(np.float64)
        w = rng.normal(size=(4, 3, 3, 3))
        wd = rng.normal(size=(3, 5, 5))
        jit_conv = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
        jit_dw = T.depthwise_conv2d(Tensor(x), Tensor(wd), padding=2)
        monkeypatch.setattr(_kernels, "HAVE_NUMBA", False)
        np_conv = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
        np_dw = T.depthwise_conv2d(Tensor(x), Tensor(wd), padding=2)
        assert np.allclose(jit_conv.data, np_conv.data, atol=1e-12)
        assert np.allclose(jit_dw.data, np_dw.data, atol=1e-12)
