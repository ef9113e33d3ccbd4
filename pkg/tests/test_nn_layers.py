"""Layer forward semantics plus the finite-difference gradient suite.

Every layer's analytic gradient is compared against central differences
at h=1e-4 on small float64 instances; inputs are kept away from kinks
(relu corners, pool ties) so the numeric derivative is well defined.
"""

import numpy as np
import pytest

from voxtex.nn import (
    Tensor, add, affine, clip, concat, conv2d, conv3d, exp, fully_connected,
    global_avg_pool, layer_norm, leaky_relu, log, max_pool2d, maximum, mul,
    parameter, reduce_mean, reduce_sum, relu, reshape, sigmoid, sub, tanh,
    transposed_conv3d, upsample2d,
)
from voxtex.nn.gradcheck import check_gradients

TOL = 1e-4


def kink_free(rng, shape, low=0.2, high=1.5):
    """Random values bounded away from zero (and from each other, a.s.)."""
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], shape)


def weigh(out, rng):
    """Random fixed projection to a scalar so transposed grads can't hide."""
    w = Tensor(rng.normal(size=out.values.shape))
    return reduce_sum(mul(out, w))


class TestForwardSemantics:
    def test_conv2d_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 4, 4, 3)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0] = np.eye(3)
        out = conv2d(x, Tensor(w), Tensor(np.zeros(3)), stride=1, padding=0)
        np.testing.assert_array_equal(out.values, x.values)

    def test_transposed_conv3d_doubles_extent(self):
        x = Tensor(np.ones((1, 4, 4, 4, 2)))
        w = Tensor(np.ones((4, 4, 4, 2, 3)))
        b = Tensor(np.zeros(3))
        out = transposed_conv3d(x, w, b, stride=2, padding=1)
        assert out.values.shape == (1, 8, 8, 8, 3)

    def test_transposed_conv3d_k2_no_pad(self):
        x = Tensor(np.ones((1, 3, 3, 3, 1)))
        w = Tensor(np.ones((2, 2, 2, 1, 1)))
        out = transposed_conv3d(x, w, Tensor(np.zeros(1)), stride=2, padding=0)
        assert out.values.shape == (1, 6, 6, 6, 1)

    def test_conv2d_shape_arithmetic(self):
        x = Tensor(np.zeros((1, 8, 8, 1)))
        w = Tensor(np.zeros((3, 3, 1, 4)))
        out = conv2d(x, w, Tensor(np.zeros(4)), stride=2, padding=1)
        assert out.values.shape == (1, 4, 4, 4)

    def test_conv_channel_mismatch_reports_both_shapes(self):
        x = Tensor(np.zeros((1, 4, 4, 2)))
        w = Tensor(np.zeros((3, 3, 5, 4)))
        with pytest.raises(ValueError, match=r"\(1, 4, 4, 2\).*\(3, 3, 5, 4\)"):
            conv2d(x, w, Tensor(np.zeros(4)), stride=1, padding=1)

    def test_fully_connected_mismatch(self):
        x = Tensor(np.zeros((2, 3)))
        w = Tensor(np.zeros((4, 5)))
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            fully_connected(x, w, Tensor(np.zeros(5)))

    def test_max_pool_values(self):
        x = Tensor(np.array([[1, 2], [3, 4]], dtype=float).reshape(1, 2, 2, 1))
        out = max_pool2d(x, size=2, stride=2)
        assert out.values.reshape(()) == 4.0

    def test_upsample_repeats(self):
        x = Tensor(np.array([[1.0, 2.0]]).reshape(1, 1, 2, 1))
        out = upsample2d(x, 2)
        np.testing.assert_array_equal(out.values[0, :, :, 0],
                                      [[1, 1, 2, 2], [1, 1, 2, 2]])

    def test_sigmoid_saturates_cleanly(self):
        # float32 is the training dtype; exp(-200) underflows to zero there,
        # so saturated gates are exactly 0 and 1
        x = Tensor(np.array([-200.0, 0.0, 200.0], dtype=np.float32))
        out = sigmoid(x)
        np.testing.assert_array_equal(out.values, np.float32([0.0, 0.5, 1.0]))

    def test_leaky_relu_slope(self):
        x = Tensor(np.array([-1.0, 2.0]))
        np.testing.assert_allclose(leaky_relu(x, 0.01).values, [-0.01, 2.0])


class TestGradients:
    def test_conv2d(self):
        rng = np.random.default_rng(1)
        x = parameter(rng.normal(size=(2, 4, 4, 3)), dtype=np.float64)
        w = parameter(rng.normal(size=(3, 3, 3, 2)) * 0.5, dtype=np.float64)
        b = parameter(rng.normal(size=2), dtype=np.float64)
        cw = Tensor(rng.normal(size=(2, 4, 4, 2)))
        err = check_gradients(
            lambda: reduce_sum(mul(conv2d(x, w, b, stride=1, padding=1), cw)),
            {"x": x, "w": w, "b": b})
        assert err < TOL

    def test_conv2d_strided(self):
        rng = np.random.default_rng(2)
        x = parameter(rng.normal(size=(1, 4, 4, 2)), dtype=np.float64)
        w = parameter(rng.normal(size=(2, 2, 2, 3)), dtype=np.float64)
        b = parameter(rng.normal(size=3), dtype=np.float64)
        cw = Tensor(rng.normal(size=(1, 2, 2, 3)))
        err = check_gradients(
            lambda: reduce_sum(mul(conv2d(x, w, b, stride=2, padding=0), cw)),
            {"x": x, "w": w, "b": b})
        assert err < TOL

    def test_conv3d(self):
        rng = np.random.default_rng(3)
        x = parameter(rng.normal(size=(1, 3, 3, 3, 2)), dtype=np.float64)
        w = parameter(rng.normal(size=(2, 2, 2, 2, 2)), dtype=np.float64)
        b = parameter(rng.normal(size=2), dtype=np.float64)
        cw = Tensor(rng.normal(size=(1, 2, 2, 2, 2)))
        err = check_gradients(
            lambda: reduce_sum(mul(conv3d(x, w, b, stride=1, padding=0), cw)),
            {"x": x, "w": w, "b": b})
        assert err < TOL

    def test_conv3d_strided_padded(self):
        rng = np.random.default_rng(4)
        x = parameter(rng.normal(size=(1, 4, 4, 4, 1)), dtype=np.float64)
        w = parameter(rng.normal(size=(3, 3, 3, 1, 2)), dtype=np.float64)
        b = parameter(rng.normal(size=2), dtype=np.float64)
        cw = Tensor(rng.normal(size=(1, 2, 2, 2, 2)))
        err = check_gradients(
            lambda: reduce_sum(mul(conv3d(x, w, b, stride=2, padding=1), cw)),
            {"x": x, "w": w, "b": b})
        assert err < TOL

    def test_transposed_conv3d(self):
        rng = np.random.default_rng(5)
        x = parameter(rng.normal(size=(1, 2, 2, 2, 2)), dtype=np.float64)
        w = parameter(rng.normal(size=(4, 4, 4, 2, 2)) * 0.3, dtype=np.float64)
        b = parameter(rng.normal(size=2), dtype=np.float64)
        cw = Tensor(rng.normal(size=(1, 4, 4, 4, 2)))
        err = check_gradients(
            lambda: reduce_sum(mul(transposed_conv3d(x, w, b, stride=2, padding=1), cw)),
            {"x": x, "w": w, "b": b})
        assert err < TOL

    def test_fully_connected(self):
        rng = np.random.default_rng(6)
        x = parameter(rng.normal(size=(3, 4)), dtype=np.float64)
        w = parameter(rng.normal(size=(4, 5)), dtype=np.float64)
        b = parameter(rng.normal(size=5), dtype=np.float64)
        cw = Tensor(rng.normal(size=(3, 5)))
        err = check_gradients(
            lambda: reduce_sum(mul(fully_connected(x, w, b), cw)),
            {"x": x, "w": w, "b": b})
        assert err < TOL

    def test_activations(self):
        rng = np.random.default_rng(7)
        for op in (relu, leaky_relu, sigmoid, tanh, exp):
            x = parameter(kink_free(rng, (3, 4)), dtype=np.float64)
            cw = Tensor(rng.normal(size=(3, 4)))
            err = check_gradients(lambda: reduce_sum(mul(op(x), cw)), {"x": x})
            assert err < TOL, op.__name__

    def test_log(self):
        rng = np.random.default_rng(8)
        x = parameter(rng.uniform(0.5, 2.0, (3, 4)), dtype=np.float64)
        cw = Tensor(rng.normal(size=(3, 4)))
        err = check_gradients(lambda: reduce_sum(mul(log(x), cw)), {"x": x})
        assert err < TOL

    def test_clip(self):
        rng = np.random.default_rng(9)
        # values straddle the clamp range but stay 0.1 away from its edges
        vals = np.concatenate([rng.uniform(-3, -1.1, 8), rng.uniform(-0.9, 0.9, 8)])
        x = parameter(rng.permutation(vals).reshape(4, 4), dtype=np.float64)
        cw = Tensor(rng.normal(size=(4, 4)))
        err = check_gradients(
            lambda: reduce_sum(mul(clip(x, -1.0, 1.0), cw)), {"x": x})
        assert err < TOL

    def test_elementwise(self):
        rng = np.random.default_rng(10)
        a = parameter(rng.normal(size=(2, 3)), dtype=np.float64)
        b = parameter(rng.normal(size=(2, 3)) + 5.0, dtype=np.float64)
        cw = Tensor(rng.normal(size=(2, 3)))
        for op in (add, sub, mul):
            err = check_gradients(lambda: reduce_sum(mul(op(a, b), cw)),
                                  {"a": a, "b": b})
            assert err < TOL, op.__name__

    def test_maximum(self):
        rng = np.random.default_rng(11)
        a = parameter(rng.normal(size=(3, 3)), dtype=np.float64)
        b = parameter(rng.normal(size=(3, 3)) + 0.5, dtype=np.float64)
        # keep operands apart so the max winner never flips under h
        gap = np.abs(a.values - b.values) < 0.05
        b.values[gap] += 0.2
        cw = Tensor(rng.normal(size=(3, 3)))
        err = check_gradients(lambda: reduce_sum(mul(maximum(a, b), cw)),
                              {"a": a, "b": b})
        assert err < TOL

    def test_affine_reshape_concat(self):
        rng = np.random.default_rng(12)
        a = parameter(rng.normal(size=(2, 4)), dtype=np.float64)
        b = parameter(rng.normal(size=(2, 2)), dtype=np.float64)
        cw = Tensor(rng.normal(size=(2, 6)))

        def build():
            joined = concat([affine(a, 1.7, -0.3), reshape(b, (2, 2))], axis=1)
            return reduce_sum(mul(joined, cw))
        err = check_gradients(build, {"a": a, "b": b})
        assert err < TOL

    def test_reductions(self):
        rng = np.random.default_rng(13)
        x = parameter(rng.normal(size=(2, 3, 4)), dtype=np.float64)
        cw = Tensor(rng.normal(size=(2, 4)))
        err = check_gradients(
            lambda: reduce_sum(mul(reduce_mean(x, 1), cw)), {"x": x})
        assert err < TOL
        err = check_gradients(lambda: reduce_sum(x), {"x": x})
        assert err < TOL

    def test_max_pool2d(self):
        rng = np.random.default_rng(14)
        # well-separated values so argmax is stable under perturbation
        vals = rng.permutation(np.arange(32, dtype=np.float64)).reshape(1, 4, 4, 2)
        x = parameter(vals * 0.37, dtype=np.float64)
        cw = Tensor(rng.normal(size=(1, 2, 2, 2)))
        err = check_gradients(
            lambda: reduce_sum(mul(max_pool2d(x, size=2, stride=2), cw)), {"x": x})
        assert err < TOL

    def test_max_pool2d_padded(self):
        rng = np.random.default_rng(15)
        vals = rng.permutation(np.arange(16, dtype=np.float64)).reshape(1, 4, 4, 1)
        x = parameter(vals * 0.21 + 1.0, dtype=np.float64)
        cw = Tensor(rng.normal(size=(1, 2, 2, 1)))
        err = check_gradients(
            lambda: reduce_sum(mul(max_pool2d(x, size=3, stride=2, padding=1), cw)),
            {"x": x})
        assert err < TOL

    def test_global_avg_pool(self):
        rng = np.random.default_rng(16)
        x = parameter(rng.normal(size=(2, 3, 3, 4)), dtype=np.float64)
        cw = Tensor(rng.normal(size=(2, 4)))
        err = check_gradients(
            lambda: reduce_sum(mul(global_avg_pool(x), cw)), {"x": x})
        assert err < TOL

    def test_upsample2d(self):
        rng = np.random.default_rng(17)
        x = parameter(rng.normal(size=(1, 2, 3, 2)), dtype=np.float64)
        cw = Tensor(rng.normal(size=(1, 4, 6, 2)))
        err = check_gradients(
            lambda: reduce_sum(mul(upsample2d(x, 2), cw)), {"x": x})
        assert err < TOL

    def test_layer_norm(self):
        rng = np.random.default_rng(18)
        x = parameter(rng.normal(size=(2, 3, 5)), dtype=np.float64)
        gain = parameter(rng.uniform(0.5, 1.5, 5), dtype=np.float64)
        bias = parameter(rng.normal(size=5), dtype=np.float64)
        cw = Tensor(rng.normal(size=(2, 3, 5)))
        err = check_gradients(
            lambda: reduce_sum(mul(layer_norm(x, gain, bias), cw)),
            {"x": x, "gain": gain, "bias": bias})
        assert err < TOL


class TestLosses:
    def test_cross_entropy_matches_grid_reference(self):
        from voxtex.grids import VoxelGrid, cross_entropy_loss
        from voxtex.nn import binary_cross_entropy
        rng = np.random.default_rng(19)
        for _ in range(20):
            p = rng.uniform(0.0, 1.0, (8, 8, 8))
            y = (rng.uniform(size=(8, 8, 8)) > 0.5).astype(np.float64)
            want = cross_entropy_loss(VoxelGrid(p), VoxelGrid(y))
            got = binary_cross_entropy(Tensor(p), y)
            assert got.values == pytest.approx(want, rel=1e-12)

    def test_cross_entropy_perfect_prediction_is_tiny(self):
        from voxtex.nn import binary_cross_entropy
        y = np.array([0.0, 1.0, 1.0, 0.0])
        loss = binary_cross_entropy(Tensor(y.copy()), y)
        assert 0.0 <= float(loss.values) < 1e-5

    def test_cross_entropy_rejects_bad_targets(self):
        from voxtex.nn import binary_cross_entropy
        with pytest.raises(ValueError, match="binary"):
            binary_cross_entropy(Tensor(np.full(3, 0.5)), np.full(3, 0.5))
        with pytest.raises(ValueError, match="vs target"):
            binary_cross_entropy(Tensor(np.full(3, 0.5)), np.zeros(4))

    def test_cross_entropy_gradient(self):
        from voxtex.nn import binary_cross_entropy
        rng = np.random.default_rng(20)
        p = parameter(rng.uniform(0.1, 0.9, (4, 4, 4)), dtype=np.float64)
        y = (rng.uniform(size=(4, 4, 4)) > 0.5).astype(np.float64)
        err = check_gradients(lambda: binary_cross_entropy(p, y), {"p": p})
        assert err < TOL

    def test_l2_uniform_offset_value(self):
        from voxtex.nn import l2_loss
        pred = Tensor(np.full((64, 64, 3), 0.6))
        target = np.full((64, 64, 3), 0.5)
        assert float(l2_loss(pred, target).values) == pytest.approx(122.88)

    def test_l2_gradient(self):
        from voxtex.nn import l2_loss
        rng = np.random.default_rng(21)
        p = parameter(rng.normal(size=(3, 5)), dtype=np.float64)
        y = rng.normal(size=(3, 5))
        err = check_gradients(lambda: l2_loss(p, y), {"p": p})
        assert err < TOL

    def test_kl_closed_form_values(self):
        from voxtex.nn import gaussian_kl
        d = 7
        zero = Tensor(np.zeros(d))
        assert float(gaussian_kl(zero, Tensor(np.zeros(d))).values) == 0.0
        ones = Tensor(np.ones(d))
        got = gaussian_kl(ones, Tensor(np.zeros(d)))
        assert float(got.values) == pytest.approx(d / 2.0)
        # unit mean, variance e: (e - 2) / 2 per dimension
        got = gaussian_kl(zero, Tensor(np.ones(d)))
        assert float(got.values) == pytest.approx(d * (np.e - 2.0) / 2.0)

    def test_kl_nonnegative(self):
        from voxtex.nn import gaussian_kl
        rng = np.random.default_rng(22)
        for _ in range(50):
            mu = Tensor(rng.normal(size=6) * 3.0)
            lv = Tensor(rng.uniform(-6.0, 4.0, 6))
            assert float(gaussian_kl(mu, lv).values) >= 0.0

    def test_kl_gradient(self):
        from voxtex.nn import gaussian_kl
        rng = np.random.default_rng(23)
        mu = parameter(rng.normal(size=5), dtype=np.float64)
        lv = parameter(rng.uniform(-1.0, 1.0, 5), dtype=np.float64)
        err = check_gradients(lambda: gaussian_kl(mu, lv), {"mu": mu, "lv": lv})
        assert err < TOL
