import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nskernel import nets
from nskernel.errors import ConfigurationError, ShapeError
from nskernel.nets import AdamState, BasisNet, adam_step, net_init


def tiny_net(positive=False):
    # 1 -> 2 -> 1 with hand-picked weights
    W = [np.array([[1.0, -2.0]]), np.array([[0.5], [-1.0]])]
    b = [np.array([0.0, 1.0]), np.array([0.25])]
    return BasisNet([1, 2, 1], W, b, positive_output=positive)


class TestForward:
    def test_hand_computed_value(self):
        x = 0.3
        h = np.log1p(np.exp([x, -2 * x + 1]))
        expected = 0.5 * h[0] - h[1] + 0.25
        np.testing.assert_allclose(tiny_net()(np.array([x])), [expected], rtol=1e-14)

    def test_positive_output_applies_softplus(self):
        x = np.linspace(-3, 3, 7)
        raw = tiny_net()(x)
        np.testing.assert_allclose(tiny_net(positive=True)(x), np.log1p(np.exp(raw)), rtol=1e-12)

    def test_counts_evaluations(self):
        net = tiny_net()
        net(np.zeros(5))
        net(np.zeros(3), keep_cache=True)
        assert net.n_evals == 8

    def test_rejects_wrong_input_dimension(self):
        net = net_init([2, 4, 1], 0)
        with pytest.raises(ShapeError):
            net(np.zeros((3, 3)))

    @pytest.mark.parametrize("dims", [[1], [1, 0, 1], [1, 4, 2]])
    def test_rejects_bad_layer_dims(self, dims):
        with pytest.raises(ConfigurationError):
            net_init(dims, 0)

    def test_rejects_bad_in_scale(self):
        with pytest.raises(ConfigurationError):
            net_init([1, 3, 1], 0, in_scale=0.0)

    def test_init_is_reproducible_and_bounded(self):
        a, b = net_init([3, 16, 1], 7), net_init([3, 16, 1], 7)
        for p, q in zip(a.params(), b.params()):
            np.testing.assert_array_equal(p, q)
        assert np.all(np.abs(a.weights[0]) <= 1 / np.sqrt(3))
        assert np.all(np.abs(a.weights[1]) <= 1 / 4)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 1000))
    def test_in_scale_equals_scaled_first_layer(self, c, seed):
        net = net_init([2, 5, 1], seed, in_scale=c)
        plain = net.copy()
        plain.in_scale = 1.0
        plain.weights[0] = plain.weights[0] * c
        x = np.random.default_rng(seed).normal(size=(4, 2))
        np.testing.assert_allclose(net(x), plain(x), rtol=1e-12, atol=1e-12)


class TestBackward:
    @pytest.mark.parametrize("positive", [False, True])
    def test_matches_finite_differences(self, positive):
        net = net_init([2, 5, 4, 1], 3, positive_output=positive, in_scale=0.7)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 2))
        dy = rng.normal(size=6)
        _, cache = net.forward(x, keep_cache=True)
        grads = net.backward(cache, dy)
        for p, g in zip(net.params(), grads):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + 1e-6
                fp = dy @ net(x)
                flat[k] = old - 1e-6
                fm = dy @ net(x)
                flat[k] = old
                np.testing.assert_allclose(gflat[k], (fp - fm) / 2e-6, rtol=1e-6, atol=1e-8)

    def test_chunked_path_matches_single_pass(self, monkeypatch):
        net = net_init([2, 8, 8, 1], 1)
        rng = np.random.default_rng(1)
        x, dy = rng.normal(size=(500, 2)), rng.normal(size=500)
        y, cache = net.forward(x, keep_cache=True)
        grads = net.backward(cache, dy)
        monkeypatch.setattr(nets, "CHUNK", 37)
        y2, cache2 = net.forward(x, keep_cache=True)
        grads2 = net.backward(cache2, dy)
        np.testing.assert_allclose(y2, y, rtol=1e-14)
        for g, g2 in zip(grads, grads2):
            np.testing.assert_allclose(g2, g, rtol=1e-12, atol=1e-13)
        assert net.n_evals == 1000


class TestAdam:
    def test_first_step_is_normalized(self):
        p = {"x": np.array([1.0, -2.0, 3.0])}
        g = {"x": np.array([0.5, -4.0, 1e-3])}
        state = AdamState.for_params(p, lr=0.1)
        adam_step(p, g, state)
        expected = np.array([1.0, -2.0, 3.0]) - 0.1 * g["x"] / (np.abs(g["x"]) + 1e-8)
        np.testing.assert_allclose(p["x"], expected, rtol=1e-12)

    def test_two_steps_match_reference_recursion(self):
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
        p = {"x": np.array([0.3])}
        state = AdamState.for_params(p, lr=lr)
        x, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate([2.0, -0.5], start=1):
            adam_step(p, {"x": np.array([g])}, state)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        np.testing.assert_allclose(p["x"], [x], rtol=1e-14)
        assert state.step == 2

    def test_lr_override_does_not_change_state_lr(self):
        p = {"x": np.zeros(2)}
        state = AdamState.for_params(p, lr=0.1)
        adam_step(p, {"x": np.ones(2)}, state, lr=0.01)
        np.testing.assert_allclose(p["x"], -0.01 * np.ones(2) / (1 + 1e-8))
        assert state.lr == 0.1

    def test_shape_mismatch(self):
        p = {"x": np.zeros(2)}
        state = AdamState.for_params(p)
        with pytest.raises(ShapeError):
            adam_step(p, {"x": np.zeros(3)}, state)

    def test_copy_is_deep(self):
        p = {"x": np.zeros(2)}
        state = AdamState.for_params(p)
        clone = state.copy()
        adam_step(p, {"x": np.ones(2)}, state)
        assert clone.step == 0 and np.all(clone.m["x"] == 0)
