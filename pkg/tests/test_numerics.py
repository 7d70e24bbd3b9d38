import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emodial.numerics import (Adam, AdamState, Schedule, ShapeError, adam_step, dropout,
                              elementwise, grad_check, matmul, noam_lr, sigmoid, softmax)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 3))
        np.testing.assert_array_equal(matmul(np.eye(2), x), x)

    def test_hand_example(self):
        np.testing.assert_array_equal(matmul(np.array([[1, 2], [3, 4]]), np.array([[1], [1]])),
                                      [[3], [7]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.full(5, 3.2)), np.full(5, 0.2))
        np.testing.assert_allclose(softmax(np.zeros(2)), [0.5, 0.5])

    def test_large_shift_no_overflow(self):
        out = softmax(np.array([1000.0, 1000.0 + math.log(2)]))
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], rtol=1e-12)

    @given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        p = softmax(x, axis=1)
        assert np.all(p > 0) and np.all(p <= 1)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(softmax(x + c, axis=1), p, atol=1e-9)


class TestElementwise:
    def test_fixed_points(self):
        assert elementwise(np.array(0.0), "sigmoid") == 0.5
        assert elementwise(np.array(0.0), "tanh") == 0.0
        np.testing.assert_array_equal(elementwise(np.array([-1.0, 2.0]), "relu"), [0.0, 2.0])

    def test_sigmoid_symmetry(self):
        x = np.random.default_rng(0).uniform(-30, 30, 1000)
        np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-12)

    def test_sigmoid_matches_logistic(self):
        x = np.linspace(-20, 20, 101)
        np.testing.assert_allclose(sigmoid(x), 1 / (1 + np.exp(-x)), rtol=1e-12)

    def test_unknown(self):
        with pytest.raises(ValueError):
            elementwise(np.zeros(2), "gelu")


class TestDropout:
    def test_identity_cases(self):
        x = np.arange(6.0)
        rng = np.random.default_rng(0)
        assert dropout(x, 0.0, rng, True)[0] is x
        assert dropout(x, 0.7, rng, False)[0] is x

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            dropout(np.ones(3), 1.0, np.random.default_rng(0), True)

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(0)
        x = np.array([1.0, -2.0, 3.5])
        total = np.zeros_like(x)
        n = 100_000
        for _ in range(n // 1000):
            batch = np.broadcast_to(x, (1000, 3))
            y, _ = dropout(batch, 0.3, rng, True)
            total += y.sum(axis=0)
        np.testing.assert_allclose(total / n, x, rtol=0.01)

    def test_survivors_scaled(self):
        y, mask = dropout(np.ones(1000), 0.25, np.random.default_rng(3), True)
        assert set(np.unique(y)) <= {0.0, 1 / 0.75}
        np.testing.assert_array_equal(y, mask)


class TestGradCheck:
    def test_linear_map(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(4, 3))
        x = rng.normal(size=(5, 4))
        R = rng.normal(size=(5, 3))

        def fn():
            return float(np.sum((x @ W) * R)), {"W": x.T @ R, "x": R @ W.T}

        assert grad_check(fn, {"W": W, "x": x}) < 1e-7

    def test_detects_wrong_gradient(self):
        W = np.ones((2, 2))

        def fn():
            return float(np.sum(W ** 2)), {"W": W}  # true gradient is 2W

        assert grad_check(fn, {"W": W}) > 0.1

    def test_nonfinite_loss(self):
        W = np.ones(2)
        with pytest.raises(FloatingPointError):
            grad_check(lambda: (float("nan"), {"W": W}), {"W": W})


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = np.array([1.0, -2.0, 3.0])
        state = AdamState.like(p)
        for step in range(1, 50):
            adam_step(p, np.zeros(3), state, lr=0.1)
            assert state.step == step
        np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])

    def test_first_step_is_signed_lr(self):
        p = np.zeros(4)
        g = np.array([0.3, -5.0, 1e-3, -2e2])
        adam_step(p, g, AdamState.like(p, eps=0.0), lr=0.01)
        np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-12)

    def test_deterministic(self):
        g = np.array([0.5, -0.1])
        out = []
        for _ in range(2):
            p = np.array([1.0, 1.0])
            s = AdamState.like(p)
            adam_step(p, g, s, 0.1)
            adam_step(p, g, s, 0.1)
            out.append(p)
        np.testing.assert_array_equal(out[0], out[1])

    def test_shape_mismatch(self):
        p = np.zeros(3)
        with pytest.raises(ShapeError):
            adam_step(p, np.zeros(2), AdamState.like(p), 0.1)

    def test_minimizes_quadratic(self):
        params = {"w": np.array([5.0, -3.0])}
        opt = Adam(Schedule("fixed", 0.1))
        for _ in range(500):
            opt.step(params, {"w": 2 * params["w"]})
        assert np.all(np.abs(params["w"]) < 1e-2)


class TestNoam:
    def test_reference_value(self):
        assert noam_lr(4000, 512, 4000) == pytest.approx(6.98771242e-4, rel=1e-8)

    def test_peak_at_warmup(self):
        lrs = [noam_lr(s, 64, 100) for s in range(1, 400)]
        assert int(np.argmax(lrs)) + 1 == 100
        assert np.all(np.diff(lrs[:99]) > 0)
        assert np.all(np.diff(lrs[99:]) < 0)
        assert 100 ** -0.5 == pytest.approx(100 * 100 ** -1.5)

    def test_step_zero(self):
        with pytest.raises(ValueError):
            noam_lr(0, 512, 4000)

    def test_schedule_factor(self):
        assert Schedule("noam", 2.0, 512, 4000)(4000) == pytest.approx(2 * noam_lr(4000, 512, 4000))
        with pytest.raises(ValueError):
            Schedule("cosine")
