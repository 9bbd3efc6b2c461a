import math

import numpy as np
import pytest

from volnet import layers
from volnet.errors import (
    DegenerateBatch,
    InvalidConfig,
    InvalidTarget,
    NumericError,
    ShapeMismatch,
)
from volnet.layers import BatchNormParams, ConvParams, DenseParams


def make_bn(c, dtype=np.float32):
    return BatchNormParams(
        gamma=np.ones(c, dtype=dtype),
        beta=np.zeros(c, dtype=dtype),
        running_mean=np.zeros(c, dtype=dtype),
        running_var=np.ones(c, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# convolution oracles: direct nested loops, no vectorization
# ---------------------------------------------------------------------------

def conv3d_oracle(x, weights, bias, padding, stride):
    c_in, d, h, w = x.shape
    c_out, _, k, _, _ = weights.shape
    if padding == "same":
        pads = []
        for extent in (d, h, w):
            out = -(-extent // stride)
            total = max((out - 1) * stride + k - extent, 0)
            pads.append((total // 2, total - total // 2))
    else:
        pads = [(0, 0)] * 3
    xp = np.pad(x, [(0, 0)] + pads)
    od = (xp.shape[1] - k) // stride + 1
    oh = (xp.shape[2] - k) // stride + 1
    ow = (xp.shape[3] - k) // stride + 1
    y = np.zeros((c_out, od, oh, ow), dtype=np.float64)
    for co in range(c_out):
        for z in range(od):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for dz in range(k):
                            for dy in range(k):
                                for dx in range(k):
                                    acc += (
                                        xp[ci, z * stride + dz, i * stride + dy, j * stride + dx]
                                        * weights[co, ci, dz, dy, dx]
                                    )
                    y[co, z, i, j] = acc + bias[co]
    return y


def maxpool_oracle(x, pool, stride):
    """Sliding-window maximum with same padding (ceil output extents)."""
    c, d, h, w = x.shape
    outs, pads = [], []
    for extent in (d, h, w):
        out = -(-extent // stride)
        total = max((out - 1) * stride + pool - extent, 0)
        outs.append(out)
        pads.append((total // 2, total - total // 2))
    xp = np.pad(x, [(0, 0)] + pads, constant_values=-np.inf)
    od, oh, ow = outs
    y = np.empty((c, od, oh, ow), dtype=x.dtype)
    for ci in range(c):
        for z in range(od):
            for i in range(oh):
                for j in range(ow):
                    y[ci, z, i, j] = xp[
                        ci,
                        z * stride : z * stride + pool,
                        i * stride : i * stride + pool,
                        j * stride : j * stride + pool,
                    ].max()
    return y


class TestConv3d:
    def test_scalar_case(self):
        x = np.full((1, 1, 1, 1), 3.0, dtype=np.float32)
        params = ConvParams(
            weights=np.full((1, 1, 1, 1, 1), 2.0, dtype=np.float32),
            bias=np.array([0.5], dtype=np.float32),
        )
        y = layers.conv3d_forward(x, params, padding="valid", stride=1)
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == pytest.approx(3.0 * 2.0 + 0.5)

    def test_counting_case(self):
        x = np.ones((1, 2, 2, 2), dtype=np.float32)
        params = ConvParams(
            weights=np.ones((1, 1, 2, 2, 2), dtype=np.float32),
            bias=np.zeros(1, dtype=np.float32),
        )
        y = layers.conv3d_forward(x, params, padding="valid", stride=1)
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == pytest.approx(8.0)

    def test_matches_nested_loop_oracle_same(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 5, 5, 5)).astype(np.float32)
        params = ConvParams(
            weights=rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32),
            bias=rng.standard_normal(3).astype(np.float32),
        )
        y = layers.conv3d_forward(x, params, padding="same", stride=1)
        want = conv3d_oracle(
            x.astype(np.float64), params.weights.astype(np.float64), params.bias, "same", 1
        )
        assert y.shape == want.shape == (3, 5, 5, 5)
        np.testing.assert_allclose(y, want, atol=1e-5)

    @pytest.mark.parametrize("padding,stride", [("valid", 1), ("same", 2), ("valid", 2)])
    def test_matches_oracle_other_configs(self, padding, stride):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((2, 6, 6, 6)).astype(np.float32)
        params = ConvParams(
            weights=rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32),
            bias=rng.standard_normal(2).astype(np.float32),
        )
        y = layers.conv3d_forward(x, params, padding=padding, stride=stride)
        want = conv3d_oracle(
            x.astype(np.float64), params.weights.astype(np.float64), params.bias, padding, stride
        )
        np.testing.assert_allclose(y, want, atol=1e-5)

    def test_same_stride1_preserves_extents_for_odd_kernels(self):
        rng = np.random.default_rng(13)
        for k in (1, 3, 5):
            x = rng.standard_normal((1, 7, 7, 7)).astype(np.float32)
            params = ConvParams(
                weights=rng.standard_normal((2, 1, k, k, k)).astype(np.float32),
                bias=np.zeros(2, dtype=np.float32),
            )
            y = layers.conv3d_forward(x, params, padding="same", stride=1)
            assert y.shape == (2, 7, 7, 7)

    def test_kernel_larger_than_valid_input(self):
        x = np.zeros((1, 2, 2, 2), dtype=np.float32)
        params = ConvParams(
            weights=np.zeros((1, 1, 3, 3, 3), dtype=np.float32),
            bias=np.zeros(1, dtype=np.float32),
        )
        with pytest.raises(ShapeMismatch):
            layers.conv3d_forward(x, params, padding="valid")

    def test_channel_mismatch(self):
        x = np.zeros((2, 4, 4, 4), dtype=np.float32)
        params = ConvParams(
            weights=np.zeros((1, 3, 3, 3, 3), dtype=np.float32),
            bias=np.zeros(1, dtype=np.float32),
        )
        with pytest.raises(ShapeMismatch):
            layers.conv3d_forward(x, params)


class TestConv3dBackward:
    def test_scalar_product_rule(self):
        v, w, b, g = 3.0, 2.0, 0.5, 1.7
        x = np.full((1, 1, 1, 1), v, dtype=np.float32)
        params = ConvParams(
            weights=np.full((1, 1, 1, 1, 1), w, dtype=np.float32),
            bias=np.array([b], dtype=np.float32),
        )
        upstream = np.full((1, 1, 1, 1), g, dtype=np.float32)
        grad_x, grads = layers.conv3d_backward(x, params, upstream, padding="valid")
        assert grads.weights[0, 0, 0, 0, 0] == pytest.approx(v * g)
        assert grads.bias[0] == pytest.approx(g)
        assert grad_x[0, 0, 0, 0] == pytest.approx(w * g)

    def test_zero_upstream(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        params = ConvParams(
            weights=rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32),
            bias=rng.standard_normal(3).astype(np.float32),
        )
        upstream = np.zeros((3, 4, 4, 4), dtype=np.float32)
        grad_x, grads = layers.conv3d_backward(x, params, upstream)
        assert not grad_x.any() and not grads.weights.any() and not grads.bias.any()

    def test_upstream_shape_checked(self):
        x = np.zeros((1, 4, 4, 4), dtype=np.float32)
        params = ConvParams(
            weights=np.zeros((1, 1, 3, 3, 3), dtype=np.float32),
            bias=np.zeros(1, dtype=np.float32),
        )
        with pytest.raises(ShapeMismatch):
            layers.conv3d_backward(x, params, np.zeros((1, 5, 5, 5), dtype=np.float32))


class TestBatchNorm:
    def test_constant_channel_goes_to_zero(self):
        x = np.full((2, 1, 2, 2, 2), 5.0, dtype=np.float32)
        y, _ = layers.batchnorm3d_forward(x, make_bn(1), mode="train")
        np.testing.assert_allclose(y, 0.0, atol=1e-3)

    def test_gamma_zero_returns_beta(self):
        params = make_bn(2)
        params.gamma[:] = 0.0
        params.beta[:] = np.array([1.5, -2.0])
        rng = np.random.default_rng(15)
        x = rng.standard_normal((3, 2, 2, 2, 2)).astype(np.float32)
        y, _ = layers.batchnorm3d_forward(x, params, mode="train")
        np.testing.assert_allclose(y[:, 0], 1.5, atol=1e-6)
        np.testing.assert_allclose(y[:, 1], -2.0, atol=1e-6)

    def test_train_normalizes_per_channel(self):
        rng = np.random.default_rng(16)
        x = (3.0 * rng.standard_normal((4, 3, 5, 5, 5)) + 2.0).astype(np.float32)
        y, _ = layers.batchnorm3d_forward(x, make_bn(3), mode="train")
        for c in range(3):
            vals = y[:, c]
            assert abs(vals.mean()) < 1e-4
            assert abs(vals.var() - 1.0) < 1e-3

    def test_running_stats_update(self):
        params = make_bn(1)
        x = np.zeros((2, 1, 2, 2, 2), dtype=np.float32)
        x[0] = 1.0  # batch mean 0.5, batch var 0.25
        layers.batchnorm3d_forward(x, params, mode="train", momentum=0.1)
        assert params.running_mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * 0.5)
        assert params.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 0.25)

    def test_infer_uses_running_stats(self):
        params = make_bn(1)
        params.running_mean[:] = 2.0
        params.running_var[:] = 4.0
        x = np.full((1, 1, 1, 1, 2), 4.0, dtype=np.float32)
        y, _ = layers.batchnorm3d_forward(x, params, mode="infer")
        np.testing.assert_allclose(y, (4.0 - 2.0) / math.sqrt(4.0 + 1e-5), rtol=1e-5)

    def test_degenerate_batch(self):
        x = np.zeros((1, 2, 1, 1, 1), dtype=np.float32)
        with pytest.raises(DegenerateBatch):
            layers.batchnorm3d_forward(x, make_bn(2), mode="train")


class TestRelu:
    def test_example(self):
        x = np.array([-1.0, 0.0, 2.0], dtype=np.float32)
        assert layers.relu(x).tolist() == [0.0, 0.0, 2.0]

    def test_all_negative(self):
        x = np.array([-3.0, -0.5], dtype=np.float32)
        up = np.ones_like(x)
        assert not layers.relu(x).any()
        assert not layers.relu_backward(x, up).any()

    def test_backward_passes_where_positive(self):
        x = np.array([-1.0, 0.0, 2.0], dtype=np.float32)
        up = np.array([10.0, 20.0, 30.0], dtype=np.float32)
        assert layers.relu_backward(x, up).tolist() == [0.0, 0.0, 30.0]


class TestMaxPool:
    def test_counting_cube(self):
        x = np.arange(1, 9, dtype=np.float32).reshape(1, 2, 2, 2)
        y, _ = layers.maxpool3d(x, pool=2, stride=2, padding="valid")
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 8.0

    def test_constant_input(self):
        x = np.full((2, 5, 5, 5), 3.25, dtype=np.float32)
        y, _ = layers.maxpool3d(x, pool=3, stride=2, padding="same")
        assert np.all(y == 3.25)

    def test_matches_window_scan_oracle(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((2, 29, 29, 29)).astype(np.float32)
        y, _ = layers.maxpool3d(x, pool=3, stride=2, padding="same")
        want = maxpool_oracle(x, 3, 2)
        assert y.shape == want.shape == (2, 15, 15, 15)
        np.testing.assert_array_equal(y, want)

    def test_backward_conserves_gradient_mass(self):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((3, 9, 9, 9)).astype(np.float32)
        y, cache = layers.maxpool3d(x, pool=3, stride=2, padding="same")
        up = rng.standard_normal(y.shape).astype(np.float32)
        grad = layers.maxpool3d_backward(cache, up)
        assert grad.shape == x.shape
        assert grad.sum() == pytest.approx(up.sum(), rel=1e-5)

    def test_backward_routes_only_to_argmax(self):
        x = np.arange(1, 9, dtype=np.float32).reshape(1, 2, 2, 2)
        y, cache = layers.maxpool3d(x, pool=2, stride=2, padding="valid")
        up = np.array([[[[2.5]]]], dtype=np.float32)
        grad = layers.maxpool3d_backward(cache, up)
        want = np.zeros_like(x)
        want[0, 1, 1, 1] = 2.5
        np.testing.assert_array_equal(grad, want)

    def test_tie_goes_to_first_window_position(self):
        x = np.full((1, 2, 2, 2), 7.0, dtype=np.float32)
        y, cache = layers.maxpool3d(x, pool=2, stride=2, padding="valid")
        grad = layers.maxpool3d_backward(cache, np.ones((1, 1, 1, 1), dtype=np.float32))
        assert grad[0, 0, 0, 0] == 1.0
        assert grad.sum() == 1.0

    def test_window_empty_after_padding(self):
        x = np.zeros((1, 2, 2, 2), dtype=np.float32)
        with pytest.raises(ShapeMismatch):
            layers.maxpool3d(x, pool=3, stride=1, padding="valid")


class TestGlobalAvgPool:
    def test_constant_channel(self):
        x = np.full((3, 4, 4, 4), 2.5, dtype=np.float32)
        np.testing.assert_allclose(layers.avgpool3d_global(x), 2.5)

    def test_counting_cube(self):
        x = np.arange(1, 9, dtype=np.float32).reshape(1, 2, 2, 2)
        assert layers.avgpool3d_global(x)[0] == pytest.approx(4.5)

    def test_matches_summation_oracle(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((4, 3, 5, 2)).astype(np.float32)
        got = layers.avgpool3d_global(x)
        want = [x[c].astype(np.float64).sum() / (3 * 5 * 2) for c in range(4)]
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_backward_uniform_and_conserving(self):
        up = np.array([6.0, -3.0], dtype=np.float32)
        grad = layers.avgpool3d_global_backward((2, 3, 1, 2), up)
        assert grad.shape == (2, 3, 1, 2)
        np.testing.assert_allclose(grad[0], 1.0)
        np.testing.assert_allclose(grad[1], -0.5)
        assert grad.sum() == pytest.approx(up.sum())


class TestDropout:
    def test_keep_prob_one_is_identity(self):
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        y, mask = layers.dropout(x, 1.0, "train")
        np.testing.assert_array_equal(y, x)
        assert mask.all()

    def test_infer_is_identity(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((4, 4)).astype(np.float32)
        y, mask = layers.dropout(x, 0.3, "infer")
        np.testing.assert_array_equal(y, x)
        assert mask is None

    def test_survival_statistics(self):
        rng = np.random.default_rng(21)
        x = np.ones(100_000, dtype=np.float32)
        y, mask = layers.dropout(x, 0.5, "train", rng)
        surviving = mask.mean()
        assert abs(surviving - 0.5) < 0.01
        assert np.all(y[mask] == pytest.approx(2.0))  # inverted scaling
        assert not y[~mask].any()

    def test_backward_uses_same_mask(self):
        rng = np.random.default_rng(22)
        x = np.ones((100,), dtype=np.float32)
        _, mask = layers.dropout(x, 0.5, "train", rng)
        up = np.ones_like(x)
        grad = layers.dropout_backward(mask, 0.5, up)
        np.testing.assert_array_equal(grad != 0, mask)

    def test_invalid_keep_prob(self):
        x = np.zeros(3, dtype=np.float32)
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(InvalidConfig):
                layers.dropout(x, bad, "train", np.random.default_rng(0))


class TestDense:
    def test_identity_weights(self):
        x = np.array([1.0, 2.0, 3.0], dtype=np.float32)
        params = DenseParams(np.eye(3, dtype=np.float32), np.zeros(3, dtype=np.float32))
        np.testing.assert_array_equal(layers.dense_forward(x, params), x)

    def test_zero_weights_returns_bias(self):
        x = np.ones(4, dtype=np.float32)
        b = np.array([1.0, -2.0], dtype=np.float32)
        params = DenseParams(np.zeros((2, 4), dtype=np.float32), b)
        np.testing.assert_array_equal(layers.dense_forward(x, params), b)

    def test_matches_matvec_oracle(self):
        rng = np.random.default_rng(23)
        x = rng.standard_normal(5).astype(np.float32)
        w = rng.standard_normal((3, 5)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        got = layers.dense_forward(x, DenseParams(w, b))
        want = [sum(w[o, i] * x[i] for i in range(5)) + b[o] for o in range(3)]
        np.testing.assert_allclose(got, want, rtol=1e-5)

    def test_backward_shapes_and_values(self):
        rng = np.random.default_rng(24)
        x = rng.standard_normal(4).astype(np.float32)
        w = rng.standard_normal((2, 4)).astype(np.float32)
        params = DenseParams(w, np.zeros(2, dtype=np.float32))
        up = rng.standard_normal(2).astype(np.float32)
        grad_x, grads = layers.dense_backward(x, params, up)
        np.testing.assert_allclose(grad_x, up @ w, rtol=1e-5)
        np.testing.assert_allclose(grads.weights, np.outer(up, x), rtol=1e-5)
        np.testing.assert_allclose(grads.bias, up, rtol=1e-6)

    def test_shape_mismatch(self):
        params = DenseParams(np.zeros((2, 4), dtype=np.float32), np.zeros(2, dtype=np.float32))
        with pytest.raises(ShapeMismatch):
            layers.dense_forward(np.zeros(3, dtype=np.float32), params)


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        np.testing.assert_allclose(layers.softmax(np.zeros(2, dtype=np.float32)), [0.5, 0.5])

    def test_log_ratio_example(self):
        z = np.log(np.array([1.0, 3.0], dtype=np.float32))
        np.testing.assert_allclose(layers.softmax(z), [0.25, 0.75], atol=1e-6)

    def test_shift_invariance(self):
        rng = np.random.default_rng(25)
        z = rng.standard_normal(5).astype(np.float32)
        c = rng.standard_normal()
        np.testing.assert_allclose(
            layers.softmax(z), layers.softmax(z + np.float32(c)), atol=1e-6
        )

    def test_sums_to_one_and_in_unit_interval(self):
        rng = np.random.default_rng(26)
        z = (10 * rng.standard_normal((8, 4))).astype(np.float32)
        p = layers.softmax(z)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(p >= 0) and np.all(p <= 1)

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            layers.softmax(np.array([0.0, np.inf], dtype=np.float32))

    def test_needs_two_classes(self):
        with pytest.raises(ShapeMismatch):
            layers.softmax(np.array([1.0], dtype=np.float32))


class TestCrossEntropy:
    def test_uniform_prediction(self):
        p = np.full(3, 1.0 / 3.0, dtype=np.float32)
        y = np.array([0.0, 1.0, 0.0], dtype=np.float32)
        loss, _ = layers.cross_entropy(p, y)
        assert loss == pytest.approx(math.log(3.0), rel=1e-5)

    def test_perfect_prediction(self):
        p = np.array([0.0, 1.0], dtype=np.float32)
        y = np.array([0.0, 1.0], dtype=np.float32)
        loss, grad = layers.cross_entropy(p, y)
        assert loss == pytest.approx(0.0, abs=1e-7)
        np.testing.assert_allclose(grad, 0.0, atol=1e-7)

    def test_gradient_is_p_minus_y(self):
        rng = np.random.default_rng(27)
        p = layers.softmax(rng.standard_normal(4).astype(np.float32))
        y = np.zeros(4, dtype=np.float32)
        y[2] = 1.0
        _, grad = layers.cross_entropy(p, y)
        np.testing.assert_allclose(grad, p - y, atol=1e-7)

    def test_clamp_keeps_loss_finite(self):
        p = np.array([1.0, 0.0], dtype=np.float32)
        y = np.array([0.0, 1.0], dtype=np.float32)
        loss, _ = layers.cross_entropy(p, y)
        assert np.isfinite(loss)
        assert loss == pytest.approx(-math.log(1e-12))

    def test_rejects_non_one_hot(self):
        p = np.full(2, 0.5, dtype=np.float32)
        with pytest.raises(InvalidTarget):
            layers.cross_entropy(p, np.array([0.5, 0.5], dtype=np.float32))
        with pytest.raises(InvalidTarget):
            layers.cross_entropy(p, np.array([1.0, 1.0], dtype=np.float32))
