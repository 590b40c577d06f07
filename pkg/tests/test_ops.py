"""Layer-op tests: hand-derived values plus finite-difference gradients."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logopipe import ops


def central_diff_grad(loss_fn, x, eps=1e-5):
    """Independent gradient oracle: central finite differences on x."""
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        hi = loss_fn()
        flat_x[i] = orig - eps
        lo = loss_fn()
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2 * eps)
    return grad


def assert_close_rel(analytic, numeric, rtol):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() <= rtol, f"max relative error {rel.max():.3e} > {rtol}"


class TestConvForward:
    def test_all_ones_3x3(self):
        x = np.ones((3, 3, 1))
        w = np.ones((3, 3, 1, 1))
        b = np.zeros(1)
        y = ops.conv2d_forward(x, w, b)
        assert y.shape == (1, 1, 1)
        assert y[0, 0, 0] == 9.0   # sum of nine 1*1 products

    def test_centered_delta_is_identity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((7, 7, 2))
        w = np.zeros((3, 3, 2, 2))
        w[1, 1, 0, 0] = 1.0
        w[1, 1, 1, 1] = 1.0
        y = ops.conv2d_forward(x, w, np.zeros(2), padding=1)
        np.testing.assert_array_equal(y, x)

    def test_table_layer1_shape(self):
        x = np.zeros((32, 32, 3))
        w = np.zeros((5, 5, 3, 32))
        y = ops.conv2d_forward(x, w, np.zeros(32), padding=2)
        assert y.shape == (32, 32, 32)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ops.conv2d_forward(np.zeros((8, 8, 3)), np.zeros((3, 3, 4, 8)),
                               np.zeros(8))

    def test_bias_added_per_channel(self):
        x = np.zeros((4, 4, 1))
        w = np.zeros((3, 3, 1, 2))
        y = ops.conv2d_forward(x, w, np.array([1.5, -2.0]), padding=1)
        np.testing.assert_array_equal(y[..., 0], 1.5)
        np.testing.assert_array_equal(y[..., 1], -2.0)

    def test_same_padding_preserves_extent(self):
        # pad = k // 2 with stride 1 keeps spatial extents
        for k in (3, 5):
            x = np.zeros((12, 12, 2))
            w = np.zeros((k, k, 2, 4))
            y = ops.conv2d_forward(x, w, np.zeros(4), padding=k // 2)
            assert y.shape == (12, 12, 4)


class TestConvBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 6, 2))
        w = rng.standard_normal((3, 3, 2, 2))
        gx, gw, gb = ops.conv2d_backward(np.zeros((4, 4, 2)), x, w)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_scalar_chain_rule(self):
        x = np.full((1, 1, 1), 3.0)
        w = np.full((1, 1, 1, 1), -2.0)
        g = np.full((1, 1, 1), 5.0)
        gx, gw, gb = ops.conv2d_backward(g, x, w)
        assert gw[0, 0, 0, 0] == 5.0 * 3.0
        assert gx[0, 0, 0] == 5.0 * (-2.0)
        assert gb[0] == 5.0

    def test_missing_cache_rejected(self):
        with pytest.raises(ValueError):
            ops.conv2d_backward(np.zeros((4, 4, 2)), None, np.zeros((3, 3, 2, 2)))

    def test_finite_difference(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((6, 6, 2))
        w = rng.standard_normal((3, 3, 2, 2))
        b = rng.standard_normal(2)
        u = rng.standard_normal((4, 4, 2))   # fixed projection

        def loss():
            return float((ops.conv2d_forward(x, w, b) * u).sum())

        gx, gw, gb = ops.conv2d_backward(u, x, w)
        assert_close_rel(gx, central_diff_grad(loss, x), 1e-5)
        assert_close_rel(gw, central_diff_grad(loss, w), 1e-5)
        assert_close_rel(gb, central_diff_grad(loss, b), 1e-5)

    def test_finite_difference_padded_batch(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 6, 6, 3))
        w = rng.standard_normal((5, 5, 3, 2))
        b = rng.standard_normal(2)
        u = rng.standard_normal((2, 6, 6, 2))

        def loss():
            return float((ops.conv2d_forward(x, w, b, padding=2) * u).sum())

        gx, gw, gb = ops.conv2d_backward(u, x, w, padding=2)
        assert_close_rel(gx, central_diff_grad(loss, x), 1e-4)
        assert_close_rel(gw, central_diff_grad(loss, w), 1e-4)
        assert_close_rel(gb, central_diff_grad(loss, b), 1e-4)


class TestPooling:
    def test_max_2x2(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        y, _ = ops.pool_forward(x, "max")
        assert y.reshape(()) == 4.0

    def test_avg_2x2(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        y, _ = ops.pool_forward(x, "avg")
        assert y.reshape(()) == 2.5

    def test_halves_extents(self):
        y, _ = ops.pool_forward(np.zeros((32, 32, 32)), "max")
        assert y.shape == (16, 16, 32)

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError):
            ops.pool_forward(np.zeros((5, 4, 1)), "max")

    def test_max_backward_routes_to_argmax(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        _, cache = ops.pool_forward(x, "max")
        gx = ops.pool_backward(np.ones((1, 1, 1)), cache)
        np.testing.assert_array_equal(gx.reshape(2, 2), [[0, 0], [0, 1]])

    def test_max_ties_first_in_row_major(self):
        x = np.full((2, 2, 1), 7.0)
        _, cache = ops.pool_forward(x, "max")
        gx = ops.pool_backward(np.ones((1, 1, 1)), cache)
        np.testing.assert_array_equal(gx.reshape(2, 2), [[1, 0], [0, 0]])

    def test_avg_backward_uniform(self):
        x = np.arange(4.0).reshape(2, 2, 1)
        _, cache = ops.pool_forward(x, "avg")
        gx = ops.pool_backward(np.ones((1, 1, 1)), cache)
        np.testing.assert_array_equal(gx.reshape(2, 2), np.full((2, 2), 0.25))

    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_finite_difference(self, kind):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 4, 4, 3))
        u = rng.standard_normal((2, 2, 2, 3))

        def loss():
            y, _ = ops.pool_forward(x, kind)
            return float((y * u).sum())

        _, cache = ops.pool_forward(x, kind)
        gx = ops.pool_backward(u, cache)
        assert_close_rel(gx, central_diff_grad(loss, x), 1e-6)


class TestRelu:
    def test_forward(self):
        np.testing.assert_array_equal(
            ops.relu_forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_backward_zero_convention(self):
        g = ops.relu_backward(np.ones(3), np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])

    def test_finite_difference_away_from_zero(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((50,))
        x[np.abs(x) < 1e-3] = 0.5   # keep clear of the kink
        u = rng.standard_normal(50)

        def loss():
            return float((ops.relu_forward(x) * u).sum())

        gx = ops.relu_backward(u, x)
        assert_close_rel(gx, central_diff_grad(loss, x), 1e-6)


class TestFullyConnected:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        y = ops.fc_forward(x, np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(y, x)

    def test_hand_matrix(self):
        # columns (1,0), (0,1), (1,1): y = [x1, x2, x1+x2]
        x = np.array([1.0, 2.0])
        w = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
        y = ops.fc_forward(x, w, np.zeros(3))
        np.testing.assert_array_equal(y, [1.0, 2.0, 3.0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ops.fc_forward(np.zeros(4), np.zeros((3, 2)), np.zeros(2))

    def test_finite_difference(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((4, 6))
        w = rng.standard_normal((6, 3))
        b = rng.standard_normal(3)
        u = rng.standard_normal((4, 3))

        def loss():
            return float((ops.fc_forward(x, w, b) * u).sum())

        gx, gw, gb = ops.fc_backward(u, x, w)
        assert_close_rel(gx, central_diff_grad(loss, x), 1e-6)
        assert_close_rel(gw, central_diff_grad(loss, w), 1e-6)
        assert_close_rel(gb, central_diff_grad(loss, b), 1e-6)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ops.softmax(np.zeros(3)),
                                   np.full(3, 1 / 3), atol=1e-15)

    def test_log_counts(self):
        y = ops.softmax(np.log(np.array([1.0, 2.0, 3.0])))
        np.testing.assert_allclose(y, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_huge_logits_stable(self):
        y = ops.softmax(np.array([1000.0, 1000.1, 999.0]))
        assert np.isfinite(y).all()
        assert abs(y.sum() - 1.0) < 1e-9

    @given(st.lists(st.floats(min_value=-50, max_value=50),
                    min_size=2, max_size=16),
           st.floats(min_value=-30, max_value=30))
    @settings(max_examples=100, deadline=None)
    def test_properties(self, logits, shift):
        z = np.array(logits)
        p = ops.softmax(z)
        assert (p >= 0).all()
        assert abs(p.sum() - 1.0) < 1e-9
        shifted = ops.softmax(z + shift)
        assert shifted.argmax() == p.argmax()


class TestWeightedCrossEntropy:
    def test_perfect_prediction(self):
        probs = np.zeros(5)
        probs[2] = 1.0
        loss, grad = ops.weighted_cross_entropy(probs, 2, 1.0)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros(5))

    def test_uniform_33_classes(self):
        probs = np.full(33, 1 / 33)
        loss, _ = ops.weighted_cross_entropy(probs, 0, 1.0)
        assert abs(loss - np.log(33)) < 1e-12   # ~3.4965

    def test_zero_weight(self):
        probs = ops.softmax(np.arange(4.0))
        loss, grad = ops.weighted_cross_entropy(probs, 1, 0.0)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros(4))

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            ops.weighted_cross_entropy(np.full(4, 0.25), 4, 1.0)

    def test_grad_matches_finite_difference_through_softmax(self):
        rng = np.random.default_rng(17)
        logits = rng.standard_normal(6)
        target, weight = 2, 0.7

        def loss():
            p = ops.softmax(logits)
            return float(ops.weighted_cross_entropy(p, target, weight)[0])

        _, grad = ops.weighted_cross_entropy(ops.softmax(logits), target, weight)
        assert_close_rel(grad, central_diff_grad(loss, logits), 1e-5)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(19)
        probs = ops.softmax(rng.standard_normal((5, 7)))
        targets = rng.integers(0, 7, size=5)
        weights = rng.uniform(0, 1, size=5)
        loss_b, grad_b = ops.weighted_cross_entropy_batch(probs, targets, weights)
        singles = [ops.weighted_cross_entropy(probs[i], int(targets[i]),
                                              float(weights[i]))
                   for i in range(5)]
        assert abs(loss_b - np.mean([s[0] for s in singles])) < 1e-12
        np.testing.assert_allclose(grad_b, np.stack([s[1] for s in singles]) / 5,
                                   atol=1e-15)


class TestSgd:
    def _bundle(self, w):
        return [ops.LayerParams(ops.Param(np.array(w, dtype=float)),
                                ops.Param(np.zeros(1)))]

    def test_single_step_no_momentum(self):
        bundle = self._bundle([0.0])
        bundle[0].weight.grad = np.array([1.0])
        ops.sgd_step(bundle, lr=0.1, momentum=0.0)
        np.testing.assert_allclose(bundle[0].weight.value, [-0.1])

    def test_zero_grad_identity(self):
        bundle = self._bundle([3.0])
        ops.sgd_step(bundle, lr=0.1, momentum=0.0)
        np.testing.assert_array_equal(bundle[0].weight.value, [3.0])

    def test_two_steps_with_momentum(self):
        # v1 = -0.1, w1 = -0.1; v2 = 0.9*-0.1 - 0.1 = -0.19, w2 = -0.29
        bundle = self._bundle([0.0])
        for _ in range(2):
            bundle[0].weight.grad = np.array([1.0])
            ops.sgd_step(bundle, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(bundle[0].weight.value, [-0.29])


@given(st.integers(min_value=0, max_value=10 ** 6))
@settings(max_examples=25, deadline=None)
def test_forward_ops_pure(seed):
    """Same inputs give bitwise-equal outputs on repeated calls."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 4, 2))
    w = rng.standard_normal((3, 3, 2, 2))
    b = rng.standard_normal(2)
    y1 = ops.conv2d_forward(x, w, b, padding=1)
    y2 = ops.conv2d_forward(x, w, b, padding=1)
    assert np.array_equal(y1, y2)
    p1, _ = ops.pool_forward(x, "max")
    p2, _ = ops.pool_forward(x, "max")
    assert np.array_equal(p1, p2)
