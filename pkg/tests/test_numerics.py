import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import away_from_zero, numerical_grad, rel_error
from ramannet import numerics as nx
from ramannet.errors import ConfigError, LabelError, ShapeError


def _dense(w, b):
    return nx.DenseLayer(np.asarray(w, dtype=float), np.asarray(b, dtype=float))


class TestDense:
    def test_identity(self):
        layer = _dense(np.eye(2), [0, 0])
        np.testing.assert_array_equal(nx.dense_forward(layer, np.array([[3.0, -1.0]])), [[3, -1]])

    def test_zero_weights_pass_bias(self):
        layer = _dense(np.zeros((3, 2)), [1, 2])
        out = nx.dense_forward(layer, np.array([[4.0, -2.0, 9.0], [0.5, 0.5, 0.5]]))
        np.testing.assert_array_equal(out, [[1, 2], [1, 2]])

    def test_summation(self):
        layer = _dense([[1], [1]], [0])
        np.testing.assert_array_equal(nx.dense_forward(layer, np.array([[2.0, 5.0]])), [[7]])

    def test_shape_error_names_dims(self):
        layer = _dense(np.eye(2), [0, 0])
        with pytest.raises(ShapeError, match=r"\[B x 2\].*\[1, 3\]"):
            nx.dense_forward(layer, np.ones((1, 3)))

    def test_bad_construction(self):
        with pytest.raises(ShapeError):
            nx.DenseLayer(np.ones((2, 3)), np.ones(2))

    def test_backward_zero_upstream(self, rng):
        layer = nx.DenseLayer.glorot(4, 3, rng, np.float64)
        x = rng.standard_normal((2, 4))
        for g in nx.dense_backward(layer, x, np.zeros((2, 3))):
            assert not g.any()

    def test_backward_scalar_chain_rule(self):
        x = np.array([[2.0, -3.0, 0.5]])
        layer = _dense([[0.1], [0.2], [0.3]], [0.0])
        gw, gb, gx = nx.dense_backward(layer, x, np.array([[1.5]]))
        np.testing.assert_allclose(gw[:, 0], 1.5 * x[0])
        np.testing.assert_allclose(gb, [1.5])
        np.testing.assert_allclose(gx[0], 1.5 * layer.weights[:, 0])

    def test_backward_matches_finite_differences(self, rng):
        layer = nx.DenseLayer.glorot(4, 3, rng, np.float64)
        layer.bias[:] = rng.standard_normal(3)
        x = rng.standard_normal((2, 4))
        up = rng.standard_normal((2, 3))
        loss = lambda: float((nx.dense_forward(layer, x) * up).sum())
        gw, gb, gx = nx.dense_backward(layer, x, up)
        assert rel_error(gw, numerical_grad(loss, layer.weights)) < 1e-5
        assert rel_error(gb, numerical_grad(loss, layer.bias)) < 1e-5
        assert rel_error(gx, numerical_grad(loss, x)) < 1e-5

    def test_glorot_is_seeded(self):
        a = nx.DenseLayer.glorot(5, 4, np.random.default_rng(3))
        b = nx.DenseLayer.glorot(5, 4, np.random.default_rng(3))
        np.testing.assert_array_equal(a.weights, b.weights)
        assert not a.bias.any()
        assert np.abs(a.weights).max() <= np.sqrt(6 / 9)


class TestLeakyRelu:
    @pytest.mark.parametrize("x,expected", [(2.0, 2.0), (-1.0, -0.3), (0.0, 0.0)])
    def test_values(self, x, expected):
        assert nx.leaky_relu(np.array(x), 0.3) == pytest.approx(expected)

    def test_gradient_at_zero_is_one(self):
        g = nx.leaky_relu_backward(np.array([0.0, -1.0, 1.0]), np.ones(3), 0.3)
        np.testing.assert_allclose(g, [1.0, 0.3, 1.0])

    def test_backward_fd(self, rng):
        x = away_from_zero(rng, (3, 5))
        up = rng.standard_normal((3, 5))
        loss = lambda: float((nx.leaky_relu(x, 0.2) * up).sum())
        assert rel_error(nx.leaky_relu_backward(x, up, 0.2), numerical_grad(loss, x)) < 1e-5


class TestBatchNorm:
    def test_constant_column_goes_to_zero(self):
        bn = nx.BatchNormLayer.create(2, np.float64)
        x = np.column_stack([np.full(6, 3.7), np.arange(6.0)])
        out, _ = nx.batchnorm_forward(bn, x, nx.TRAIN)
        assert np.abs(out[:, 0]).max() <= 1e-3

    def test_beta_shifts_mean(self, rng):
        bn = nx.BatchNormLayer.create(3, np.float64)
        bn.beta[:] = 5.0
        out, _ = nx.batchnorm_forward(bn, rng.standard_normal((10, 3)) * 4 + 1, nx.TRAIN)
        np.testing.assert_allclose(out.mean(axis=0), 5.0, atol=1e-9)

    def test_infer_identity_with_unit_stats(self, rng):
        bn = nx.BatchNormLayer.create(4, np.float64)
        x = rng.standard_normal((5, 4))
        out, _ = nx.batchnorm_forward(bn, x, nx.INFER)
        np.testing.assert_allclose(out, x / np.sqrt(1 + bn.epsilon))

    def test_infer_ignores_batch(self, rng):
        bn = nx.BatchNormLayer.create(3, np.float64)
        bn.running_mean[:] = [1, 2, 3]
        bn.running_var[:] = [4, 5, 6]
        x = rng.standard_normal((6, 3))
        out_full, _ = nx.batchnorm_forward(bn, x, nx.INFER)
        out_row, _ = nx.batchnorm_forward(bn, x[:1], nx.INFER)
        np.testing.assert_array_equal(out_full[:1], out_row)

    def test_running_stats_update(self, rng):
        bn = nx.BatchNormLayer.create(2, np.float64, momentum=0.9)
        x = rng.standard_normal((8, 2)) * 3 + 2
        nx.batchnorm_forward(bn, x, nx.TRAIN)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0))
        assert (bn.running_var >= 0).all()

    def test_no_update_when_disabled(self, rng):
        bn = nx.BatchNormLayer.create(2, np.float64)
        nx.batchnorm_forward(bn, rng.standard_normal((4, 2)), nx.TRAIN, update_stats=False)
        assert not bn.running_mean.any()

    def test_train_needs_two_rows(self):
        bn = nx.BatchNormLayer.create(2, np.float64)
        with pytest.raises(ShapeError):
            nx.batchnorm_forward(bn, np.ones((1, 2)), nx.TRAIN)

    def test_normalized_statistics(self, rng):
        bn = nx.BatchNormLayer.create(6, np.float64)
        x = rng.standard_normal((32, 6)) * rng.uniform(2, 10, 6) + rng.uniform(-5, 5, 6)
        _, (_, xhat, _) = nx.batchnorm_forward(bn, x, nx.TRAIN)
        assert np.abs(xhat.mean(axis=0)).max() <= 1e-6 * np.abs(xhat).max()
        var = xhat.var(axis=0)
        assert ((var > 1 - 1e-3) & (var < 1 + 1e-3)).all()

    @pytest.mark.parametrize("mode", [nx.TRAIN, nx.INFER])
    def test_backward_fd(self, rng, mode):
        bn = nx.BatchNormLayer.create(3, np.float64)
        bn.gamma[:] = rng.uniform(0.5, 2, 3)
        bn.beta[:] = rng.standard_normal(3)
        bn.running_mean[:] = rng.standard_normal(3)
        bn.running_var[:] = rng.uniform(0.5, 2, 3)
        x = rng.standard_normal((5, 3))
        up = rng.standard_normal((5, 3))
        loss = lambda: float((nx.batchnorm_forward(bn, x, mode, update_stats=False)[0] * up).sum())
        _, cache = nx.batchnorm_forward(bn, x, mode, update_stats=False)
        gg, gb, gx = nx.batchnorm_backward(bn, cache, up)
        assert rel_error(gg, numerical_grad(loss, bn.gamma)) < 1e-5
        assert rel_error(gb, numerical_grad(loss, bn.beta)) < 1e-5
        assert rel_error(gx, numerical_grad(loss, x)) < 1e-5

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            nx.BatchNormLayer.create(2, momentum=1.0)
        with pytest.raises(ConfigError):
            nx.BatchNormLayer.create(2, epsilon=0.0)


class TestDropout:
    def test_rate_zero_identity(self, rng):
        x = rng.standard_normal((3, 4))
        for mode in (nx.TRAIN, nx.INFER):
            out, mask = nx.dropout_apply(nx.DropoutSpec(0.0), x, mode, rng)
            assert out is x and mask is None

    def test_infer_identity(self, rng):
        x = rng.standard_normal((3, 4))
        out, _ = nx.dropout_apply(nx.DropoutSpec(0.5), x, nx.INFER)
        assert out is x

    def test_expectation_preserved(self):
        x = np.ones(10**6)
        out, _ = nx.dropout_apply(nx.DropoutSpec(0.5), x, nx.TRAIN, np.random.default_rng(0))
        assert abs(out.mean() - 1.0) < 0.01
        assert set(np.unique(out)) == {0.0, 2.0}

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            nx.DropoutSpec(1.0)

    def test_seeded(self):
        x = np.ones((4, 5))
        a, _ = nx.dropout_apply(nx.DropoutSpec(0.3), x, nx.TRAIN, np.random.default_rng(9))
        b, _ = nx.dropout_apply(nx.DropoutSpec(0.3), x, nx.TRAIN, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_backward_uses_mask(self, rng):
        x = rng.standard_normal((4, 6))
        up = rng.standard_normal((4, 6))
        _, mask = nx.dropout_apply(nx.DropoutSpec(0.4), x, nx.TRAIN, np.random.default_rng(1))
        loss = lambda: float((x * mask * up).sum())
        assert rel_error(nx.dropout_backward(mask, up), numerical_grad(loss, x)) < 1e-5


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = nx.softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
        assert loss == pytest.approx(np.log(4))

    def test_large_logit_stable(self):
        loss, grad = nx.softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(grad).all()

    def test_rows_sum_to_one(self, rng):
        p = nx.softmax(rng.standard_normal((7, 5)) * 30)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_fd(self, rng):
        logits = rng.standard_normal((3, 5))
        labels = np.array([4, 0, 2])
        _, grad = nx.softmax_cross_entropy(logits, labels)
        num = numerical_grad(lambda: nx.softmax_cross_entropy(logits, labels)[0], logits)
        assert rel_error(grad, num) < 1e-5

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            nx.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    @given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)), st.lists(st.integers(0, 2), min_size=4, max_size=4))
    @settings(max_examples=50, deadline=None)
    def test_loss_nonnegative(self, logits, labels):
        loss, _ = nx.softmax_cross_entropy(logits, np.array(labels))
        assert loss >= 0


class TestTripletLoss:
    def test_all_equal_gives_margin(self, rng):
        a = rng.standard_normal((4, 3))
        loss, _ = nx.triplet_loss(a, a.copy(), a.copy(), 0.7)
        assert loss == pytest.approx(0.7)

    def test_hinge_boundary(self):
        a = np.zeros((1, 2))
        n = np.array([[np.sqrt(0.5), 0.0]])
        loss, grads = nx.triplet_loss(a, a.copy(), n, 0.5)
        assert loss == pytest.approx(0.0, abs=1e-12)
        for g in grads:
            assert not g.any()

    def test_fd_away_from_hinge(self, rng):
        for _ in range(10):
            a, p, n = (rng.standard_normal((6, 4)) for _ in range(3))
            margin = 1.0
            hinge = ((a - p) ** 2).sum(1) - ((a - n) ** 2).sum(1) + margin
            if np.abs(hinge).min() < 1e-2:
                continue
            _, grads = nx.triplet_loss(a, p, n, margin)
            loss = lambda: nx.triplet_loss(a, p, n, margin)[0]
            for g, x in zip(grads, (a, p, n)):
                assert rel_error(g, numerical_grad(loss, x)) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nx.triplet_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 3)), 1.0)

    def test_empty(self):
        loss, grads = nx.triplet_loss(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), 1.0)
        assert loss == 0.0 and grads[0].shape == (0, 3)

    @given(arrays(np.float64, (3, 5, 2), elements=st.floats(-10, 10)), st.floats(0, 5))
    @settings(max_examples=100, deadline=None)
    def test_nonnegative_and_zero_when_separated(self, t, margin):
        a, p, n = t
        loss, _ = nx.triplet_loss(a, p, n, margin)
        assert loss >= 0
        d_ap = ((a - p) ** 2).sum(1)
        d_an = ((a - n) ** 2).sum(1)
        sep = d_ap + margin <= d_an
        if sep.all():
            assert loss == 0.0


class TestAdam:
    def test_zero_grads_leave_params(self, rng):
        p = {"w": rng.standard_normal((3, 2))}
        before = p["w"].copy()
        state = nx.AdamState()
        nx.adam_step(state, p, {"w": np.zeros((3, 2))})
        np.testing.assert_array_equal(p["w"], before)
        assert state.step_count == 1

    @pytest.mark.parametrize("g", [1e-3, 1.0, 250.0, -4.0])
    def test_first_step_is_sign_step(self, g):
        p = {"x": np.array([0.0])}
        nx.adam_step(nx.AdamState(learning_rate=0.01), p, {"x": np.array([g])})
        assert p["x"][0] == pytest.approx(-0.01 * np.sign(g), rel=1e-4)

    def test_quadratic_bowl(self):
        p = {"x": np.array([1.0])}
        state = nx.AdamState(learning_rate=0.1)
        for _ in range(200):
            nx.adam_step(state, p, {"x": 2 * p["x"]})
        assert abs(p["x"][0]) < 0.05
        assert state.step_count == 200

    def test_moments_start_at_zero_and_match_reference(self, rng):
        # textbook form with explicit bias correction
        w = rng.standard_normal(4)
        p = {"w": w.copy()}
        state = nx.AdamState(learning_rate=0.05)
        m = np.zeros(4)
        v = np.zeros(4)
        ref = w.copy()
        for t in range(1, 6):
            g = rng.standard_normal(4)
            nx.adam_step(state, p, {"w": g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"], ref, rtol=1e-10, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nx.adam_step(nx.AdamState(), {"w": np.zeros(3)}, {"w": np.zeros(4)})
