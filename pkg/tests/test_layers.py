import numpy as np
import pytest

from msnn.layers import (
    BatchNorm,
    DenseSoftmax,
    LeakyRelu,
    SeparableConv,
    SpatialConv,
    Tape,
    TemporalConv,
    concat_feature_maps,
    global_average_pool,
    global_average_pool_backward,
    softmax,
    split_feature_maps,
)


def loop_temporal_conv(x, kernels, bias):
    """Brute-force valid channel-wise temporal convolution."""
    b, c, t, _ = x.shape
    n_maps, klen = kernels.shape
    out = np.zeros((b, c, t - klen + 1, n_maps))
    for bi in range(b):
        for ci in range(c):
            for ti in range(t - klen + 1):
                for f in range(n_maps):
                    acc = 0.0
                    for u in range(klen):
                        acc += kernels[f, u] * x[bi, ci, ti + u, 0]
                    out[bi, ci, ti, f] = acc + bias[f]
    return out


def loop_separable(x, depthwise, pointwise, bias):
    """Two-stage oracle: explicit padded depthwise loop then matrix mix."""
    b, c, t, f_in = x.shape
    _, klen = depthwise.shape
    left = (klen - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (left, klen - 1 - left), (0, 0)))
    mid = np.zeros_like(x)
    for ti in range(t):
        for u in range(klen):
            mid[:, :, ti, :] += xp[:, :, ti + u, :] * depthwise[:, u]
    return mid @ pointwise + bias


def loop_full_conv_rank1(x, depthwise, pointwise, bias):
    """Equivalent full convolution with rank-1 kernels
    K[fo, fi, u] = pointwise[fi, fo] * depthwise[fi, u]."""
    b, c, t, f_in = x.shape
    f_out = pointwise.shape[1]
    _, klen = depthwise.shape
    left = (klen - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (left, klen - 1 - left), (0, 0)))
    kern = pointwise.T[:, :, None] * depthwise[None, :, :]  # [fo, fi, u]
    out = np.zeros((b, c, t, f_out))
    for ti in range(t):
        for u in range(klen):
            out[:, :, ti, :] += xp[:, :, ti + u, :] @ kern[:, :, u].T
    return out + bias


def loop_spatial(x, kernels, bias):
    b, c, t, f_in = x.shape
    f_out = kernels.shape[0]
    out = np.zeros((b, 1, t, f_out))
    for bi in range(b):
        for ti in range(t):
            for j in range(f_out):
                out[bi, 0, ti, j] = (kernels[j] * x[bi, :, ti, :]).sum() + bias[j]
    return out


class TestTemporalConv:
    def test_output_length_formula(self):
        layer = TemporalConv("stem", 4, 256)
        layer.init(np.random.default_rng(0))
        y = layer.forward(np.zeros((1, 3, 1024, 1)))
        assert y.shape == (1, 3, 769, 4)  # 1024 - 256 + 1

    def test_unit_impulse_is_identity_prefix(self):
        layer = TemporalConv("stem", 1, 5)
        layer.kernels = np.zeros((1, 5))
        layer.kernels[0, 0] = 1.0
        x = np.random.default_rng(1).standard_normal((2, 3, 20, 1))
        y = layer.forward(x)
        np.testing.assert_allclose(y[..., 0], x[:, :, :16, 0], atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        layer = TemporalConv("stem", 2, 4)
        layer.init(rng)
        layer.bias = rng.standard_normal(2)
        x = rng.standard_normal((1, 2, 16, 1))
        np.testing.assert_allclose(
            layer.forward(x), loop_temporal_conv(x, layer.kernels, layer.bias), atol=1e-12
        )

    def test_kernel_longer_than_input_rejected(self):
        layer = TemporalConv("stem", 1, 64)
        with pytest.raises(ValueError, match="longer"):
            layer.forward(np.zeros((1, 1, 32, 1)))


class TestSeparableConv:
    def test_impulse_identity(self):
        layer = SeparableConv("sep", 3, 3, 5)
        layer.depthwise = np.zeros((3, 5))
        layer.depthwise[:, 2] = 1.0  # centered tap
        layer.pointwise = np.eye(3)
        x = np.random.default_rng(3).standard_normal((2, 2, 12, 3))
        np.testing.assert_allclose(layer.forward(x), x, atol=1e-12)

    def test_matches_two_stage_oracle(self):
        rng = np.random.default_rng(4)
        layer = SeparableConv("sep", 4, 8, 5)
        layer.init(rng)
        layer.bias = rng.standard_normal(8)
        x = rng.standard_normal((2, 3, 20, 4))
        np.testing.assert_allclose(
            layer.forward(x),
            loop_separable(x, layer.depthwise, layer.pointwise, layer.bias),
            atol=1e-12,
        )

    def test_matches_rank1_full_convolution(self):
        rng = np.random.default_rng(5)
        layer = SeparableConv("sep", 3, 6, 4)
        layer.init(rng)
        layer.bias = rng.standard_normal(6)
        x = rng.standard_normal((1, 2, 15, 3))
        np.testing.assert_allclose(
            layer.forward(x),
            loop_full_conv_rank1(x, layer.depthwise, layer.pointwise, layer.bias),
            atol=1e-12,
        )

    def test_even_kernel_pads_extra_right(self):
        layer = SeparableConv("sep", 1, 1, 4)
        assert layer.pad == (1, 2)

    def test_map_mismatch_rejected(self):
        layer = SeparableConv("sep", 3, 6, 4)
        with pytest.raises(ValueError, match="maps"):
            layer.forward(np.zeros((1, 2, 10, 2)))


class TestSpatialConv:
    def test_uniform_weights_give_channel_mean(self):
        n_c = 5
        layer = SpatialConv("spat", n_c, 2, 2)
        layer.kernels = np.zeros((2, n_c, 2))
        layer.kernels[0, :, 0] = 1.0 / n_c
        x = np.random.default_rng(6).standard_normal((2, n_c, 9, 2))
        y = layer.forward(x)
        np.testing.assert_allclose(y[:, 0, :, 0], x[..., 0].mean(axis=1), atol=1e-12)
        np.testing.assert_allclose(y[:, 0, :, 1], 0.0, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        layer = SpatialConv("spat", 4, 3, 3)
        layer.init(rng)
        layer.bias = rng.standard_normal(3)
        x = rng.standard_normal((2, 4, 10, 3))
        np.testing.assert_allclose(
            layer.forward(x), loop_spatial(x, layer.kernels, layer.bias), atol=1e-12
        )

    def test_channel_collapse_shape(self):
        layer = SpatialConv("spat", 8, 16, 16)
        layer.init(np.random.default_rng(8))
        assert layer.forward(np.zeros((1, 8, 100, 16))).shape == (1, 1, 100, 16)

    def test_channel_mismatch_rejected(self):
        layer = SpatialConv("spat", 8, 4, 4)
        with pytest.raises(ValueError, match="kernel"):
            layer.forward(np.zeros((1, 6, 10, 4)))


class TestBatchNorm:
    def test_standardized_batch_near_identity(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((8, 3, 40, 2))
        x -= x.mean(axis=(0, 1, 2))
        x /= x.std(axis=(0, 1, 2))
        bn = BatchNorm("bn", 2)
        y = bn.forward(x, train=True)
        np.testing.assert_allclose(y, x, atol=1e-4)

    def test_constant_map_normalized_to_zero(self):
        bn = BatchNorm("bn", 1)
        y = bn.forward(np.full((4, 2, 10, 1), 7.0), train=True)
        np.testing.assert_allclose(y, 0.0, atol=1e-12)

    def test_train_mode_moments(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((16, 4, 30, 3)) * 2.5 + 1.0
        bn = BatchNorm("bn", 3)
        y = bn.forward(x, train=True)  # gamma=1, beta=0: output is xhat
        np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1.0, atol=1e-5)

    def test_eval_before_update_rejected(self):
        bn = BatchNorm("bn", 2)
        with pytest.raises(RuntimeError, match="before any training update"):
            bn.forward(np.zeros((1, 1, 5, 2)), train=False)

    def test_eval_deterministic_affine(self):
        rng = np.random.default_rng(11)
        bn = BatchNorm("bn", 2)
        bn.forward(rng.standard_normal((8, 2, 20, 2)), train=True)
        x = rng.standard_normal((3, 2, 20, 2))
        y1 = bn.forward(x, train=False)
        y2 = bn.forward(x, train=False)
        np.testing.assert_array_equal(y1, y2)

    def test_running_stats_ema(self):
        bn = BatchNorm("bn", 1, momentum=0.9)
        x = np.random.default_rng(12).standard_normal((4, 1, 50, 1)) + 3.0
        bn.forward(x, train=True)
        expected = 0.9 * 0.0 + 0.1 * x.mean()
        np.testing.assert_allclose(bn.running_mean, [expected], atol=1e-12)


class TestLeakyRelu:
    def test_positive_passthrough(self):
        layer = LeakyRelu("act", 0.01)
        np.testing.assert_allclose(layer.forward(np.full((1, 1, 1, 1), 2.0)), 2.0)

    def test_negative_scaled(self):
        layer = LeakyRelu("act", 0.01)
        np.testing.assert_allclose(layer.forward(np.full((1, 1, 1, 1), -2.0)), -0.02)

    def test_strictly_monotonic(self):
        layer = LeakyRelu("act", 0.05)
        x = np.sort(np.random.default_rng(13).standard_normal(100))
        y = layer.forward(x.reshape(1, 1, 100, 1)).ravel()
        assert (np.diff(y) > 0).all()

    def test_slope_validated(self):
        with pytest.raises(ValueError, match="slope"):
            LeakyRelu("act", 1.5)


class TestGapAndConcat:
    def test_gap_mean(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3, 1)
        np.testing.assert_allclose(global_average_pool(x), [[[[2.0]]]])

    def test_gap_linearity(self):
        rng = np.random.default_rng(14)
        x, y = rng.standard_normal((2, 1, 1, 9, 3))
        lhs = global_average_pool(2.0 * x - 0.5 * y)
        rhs = 2.0 * global_average_pool(x) - 0.5 * global_average_pool(y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_gap_constant(self):
        np.testing.assert_allclose(global_average_pool(np.full((1, 1, 7, 2), 4.2)), 4.2)

    def test_gap_empty_time_rejected(self):
        with pytest.raises(ValueError, match="empty time"):
            global_average_pool(np.zeros((1, 1, 0, 2)))

    def test_gap_backward_distributes_mean(self):
        gy = np.ones((1, 1, 1, 2))
        gx = global_average_pool_backward(gy, 5)
        np.testing.assert_allclose(gx, 0.2)

    def test_concat_widths(self):
        xs = [np.zeros((1, 1, 10, f)) for f in (16, 32, 64)]
        assert concat_feature_maps(xs).shape == (1, 1, 10, 112)

    def test_concat_single_identity(self):
        x = np.random.default_rng(15).standard_normal((1, 1, 5, 3))
        np.testing.assert_array_equal(concat_feature_maps([x]), x)

    def test_concat_slices_recover(self):
        rng = np.random.default_rng(16)
        xs = [rng.standard_normal((2, 1, 6, f)) for f in (2, 3, 4)]
        cat = concat_feature_maps(xs)
        parts = split_feature_maps(cat, [2, 3, 4])
        for part, x in zip(parts, xs):
            np.testing.assert_array_equal(part, x)

    def test_concat_mismatch_rejected(self):
        with pytest.raises(ValueError, match="concatenate"):
            concat_feature_maps([np.zeros((1, 1, 5, 2)), np.zeros((1, 1, 6, 2))])


class TestDenseSoftmax:
    def test_zero_weights_uniform(self):
        layer = DenseSoftmax("cls", 4, 2)
        probs = layer.forward(np.random.default_rng(17).standard_normal((3, 4)) * 0)
        np.testing.assert_allclose(probs, 0.5)

    def test_analytic_example(self):
        np.testing.assert_allclose(
            softmax(np.log([[1.0, 3.0]])), [[0.25, 0.75]], atol=1e-12
        )

    def test_shift_invariance(self):
        logits = np.array([[0.3, -1.2, 2.0]])
        np.testing.assert_allclose(softmax(logits), softmax(logits + 100.0), atol=1e-12)

    def test_simplex_for_random_logits(self):
        rng = np.random.default_rng(18)
        probs = softmax(rng.standard_normal((50, 6)) * 30)
        assert (probs > 0).all()
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_feature_dim_checked(self):
        layer = DenseSoftmax("cls", 4, 2)
        with pytest.raises(ValueError, match="feature dim"):
            layer.forward(np.zeros((1, 5)))


class TestTape:
    def test_double_record_rejected(self):
        tape = Tape()
        tape.put("layer", 1)
        with pytest.raises(RuntimeError, match="twice"):
            tape.put("layer", 2)

    def test_consume_once(self):
        tape = Tape()
        tape.consume()
        with pytest.raises(RuntimeError, match="already consumed"):
            tape.consume()

    def test_missing_cache(self):
        with pytest.raises(RuntimeError, match="no forward"):
            Tape().get("nope")
