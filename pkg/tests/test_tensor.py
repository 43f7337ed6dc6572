import io
import math

import numpy as np
import pytest

from kernel import Tensor
from kernel.Tensor import BNState, ConvSpec


def conv_oracle(x, w, b, stride):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    oh, ow = math.ceil(h / stride), math.ceil(wd / stride)
    pt = max((oh - 1) * stride + k - h, 0) // 2
    pl = max((ow - 1) * stride + k - wd, 0) // 2
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                y, xx = i * stride + di - pt, j * stride + dj - pl
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[ni, ci, y, xx] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


def pool_oracle(x, k, stride):
    n, c, h, w = x.shape
    oh, ow = math.ceil(h / stride), math.ceil(w / stride)
    pt = max((oh - 1) * stride + k - h, 0) // 2
    pl = max((ow - 1) * stride + k - w, 0) // 2
    out = np.full((n, c, oh, ow), -np.inf)
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    for di in range(k):
                        for dj in range(k):
                            y, xx = i * stride + di - pt, j * stride + dj - pl
                            if 0 <= y < h and 0 <= xx < w:
                                out[ni, ci, i, j] = max(out[ni, ci, i, j], x[ni, ci, y, xx])
    return out


class TestConv2d:
    @pytest.mark.parametrize('k, stride, h, w', [(3, 1, 5, 7), (1, 2, 5, 6), (3, 2, 7, 5), (7, 2, 9, 8), (5, 1, 4, 4)])
    def test_matches_loop_oracle(self, rng, k, stride, h, w):
        spec = ConvSpec(k, stride, 2, 3)
        x = rng.normal(size=(2, 2, h, w))
        weights = rng.normal(size=spec.weight_shape)
        bias = rng.normal(size=3)
        out, _ = Tensor.conv2d(x, weights, bias, spec)
        assert out.shape == (2, 3, math.ceil(h / stride), math.ceil(w / stride))
        np.testing.assert_allclose(out, conv_oracle(x, weights, bias, stride), atol=1e-12)

    def test_backward_matches_finite_differences(self, rng):
        spec = ConvSpec(3, 2, 2, 2)
        x = rng.normal(size=(1, 2, 5, 4))
        weights = rng.normal(size=spec.weight_shape)
        bias = rng.normal(size=2)
        upstream = rng.normal(size=(1, 2, 3, 2))
        out, cache = Tensor.conv2d(x, weights, bias, spec)
        dx, dw, db = Tensor.conv2d_backward(upstream, weights, spec, cache)

        eps = 1e-6
        for index in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 4, 1)]:
            plus, minus = x.copy(), x.copy()
            plus[index] += eps
            minus[index] -= eps
            numeric = ((Tensor.conv2d(plus, weights, bias, spec)[0] - Tensor.conv2d(minus, weights, bias, spec)[0])
                       * upstream).sum() / (2 * eps)
            assert dx[index] == pytest.approx(numeric, rel=1e-6, abs=1e-9)
        assert db == pytest.approx(upstream.sum(axis=(0, 2, 3)))
        assert dw.shape == weights.shape

    def test_rejects_wrong_channel_count(self, rng):
        spec = ConvSpec(3, 1, 2, 3)
        with pytest.raises(Tensor.ShapeError):
            Tensor.conv2d(rng.normal(size=(1, 3, 4, 4)), np.zeros(spec.weight_shape), np.zeros(3), spec)

    def test_non_finite_output_raises(self):
        spec = ConvSpec(1, 1, 1, 1)
        x = np.full((1, 1, 2, 2), np.inf)
        with pytest.raises(Tensor.NonFiniteError):
            Tensor.conv2d(x, np.ones(spec.weight_shape), np.zeros(1), spec)


class TestMaxPool:
    @pytest.mark.parametrize('h, w', [(6, 6), (7, 5), (1, 3)])
    def test_matches_loop_oracle(self, rng, h, w):
        x = rng.normal(size=(2, 3, h, w))
        out, _ = Tensor.max_pool2d(x, 3, 2)
        np.testing.assert_array_equal(out, pool_oracle(x, 3, 2))

    def test_backward_routes_to_the_maximum(self):
        x = np.zeros((1, 1, 2, 2))
        x[0, 0, 1, 0] = 5.0
        out, cache = Tensor.max_pool2d(x, 2, 2)
        dx = Tensor.max_pool2d_backward(np.ones_like(out), cache)
        expected = np.zeros_like(x)
        expected[0, 0, 1, 0] = 1.0
        np.testing.assert_array_equal(dx, expected)


class TestBatchNorm:
    def test_train_normalizes_and_updates_statistics(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 2, 5, 5))
        state = BNState(2, momentum=0.9)
        out, _ = Tensor.batch_norm(x, np.ones(2), np.zeros(2), state, 'train')
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_eval_uses_running_statistics(self):
        state = BNState(1, eps=0.0)
        state.running_mean = np.array([1.0])
        state.running_var = np.array([4.0])
        out, _ = Tensor.batch_norm(np.full((1, 1, 1, 2), 5.0), np.array([2.0]), np.array([1.0]), state, 'eval')
        np.testing.assert_allclose(out, 5.0)

    def test_eval_without_statistics_raises(self):
        with pytest.raises(Tensor.BatchNormStateError):
            Tensor.batch_norm(np.zeros((1, 1, 2, 2)), np.ones(1), np.zeros(1), BNState(1), 'eval')


class TestResize:
    def test_same_size_is_identity(self, rng):
        x = rng.normal(size=(1, 1, 4, 6))
        np.testing.assert_allclose(Tensor.resize_bilinear(x, 4, 6)[0], x)

    def test_constant_stays_constant(self):
        out, _ = Tensor.resize_bilinear(np.full((2, 1, 3, 5), 0.25), 6, 10)
        np.testing.assert_allclose(out, 0.25)

    def test_backward_is_the_adjoint(self, rng):
        x = rng.normal(size=(1, 2, 3, 4))
        out, cache = Tensor.resize_bilinear(x, 6, 8)
        y = rng.normal(size=out.shape)
        assert (out * y).sum() == pytest.approx((x * Tensor.resize_bilinear_backward(y, cache)).sum())


def test_unpool_places_values_on_even_positions():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    out = Tensor.unpool2x(x)
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(out[0, 0, ::2, ::2], x[0, 0])
    assert out.sum() == x.sum()


def test_tensor_blob_keeps_shape_and_values(rng):
    values = rng.normal(size=(2, 3, 1))
    buffer = io.BytesIO()
    Tensor.write_tensor(buffer, values)
    buffer.seek(0)
    np.testing.assert_array_equal(Tensor.read_tensor(buffer), values)


def test_truncated_blob_raises():
    with pytest.raises(Tensor.ShapeError):
        Tensor.read_tensor(io.BytesIO(b'\x01\x00'))
