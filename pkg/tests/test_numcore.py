import math

import numpy as np
import pytest

from ftn.errors import ConfigError, DataError
from ftn.numcore import AdamState, LossKind, RngStream, adam_reset, adam_step, loss_and_grad, per_sample_loss_grad, rng_uniform, sigmoid


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


class TestRng:
    def test_same_seed_same_draws(self):
        a = rng_uniform(RngStream(0, 0), 3, 0.0, 1.0)
        b = rng_uniform(RngStream(0, 0), 3, 0.0, 1.0)
        assert np.array_equal(a, b)

    def test_seed_sensitivity(self):
        assert not np.array_equal(RngStream(0).uniform(3), RngStream(1).uniform(3))

    def test_stream_ids_independent(self):
        assert not np.array_equal(RngStream(0, 1).uniform(3), RngStream(0, 2).uniform(3))

    def test_law_of_large_numbers(self):
        u = RngStream(7).uniform(10**5, 0.0, 1.0)
        assert abs(u.mean() - 0.5) < 0.01
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_range_respected(self):
        u = RngStream(3).uniform(1000, -2.0, -1.5)
        assert u.min() >= -2.0 and u.max() < -1.5

    def test_bad_interval(self):
        with pytest.raises(ConfigError):
            rng_uniform(RngStream(0), 3, 1.0, 1.0)

    def test_substream_is_deterministic_and_distinct(self):
        s = RngStream(5, 3)
        assert np.array_equal(s.substream(2).uniform(4), RngStream(5, 3).substream(2).uniform(4))
        assert not np.array_equal(s.substream(2).uniform(4), s.substream(3).uniform(4))

    def test_negative_seed_rejected(self):
        with pytest.raises(ConfigError):
            RngStream(-1)


class TestAdam:
    def test_zero_grad_fresh_state(self):
        p = np.array([1.5, -2.0])
        adam_step(AdamState(), p, np.zeros(2))
        assert np.array_equal(p, [1.5, -2.0])

    def test_converges_on_square(self):
        x = np.array([3.0])
        st = AdamState(lr=0.1)
        for _ in range(200):
            adam_step(st, x, 2 * x)
        assert abs(x[0]) < 1e-2

    def test_first_step_closed_form(self):
        # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        for g in (0.3, -7.0, 1e-3):
            p = np.zeros(1)
            adam_step(AdamState(lr=0.01), p, np.array([g]))
            assert p[0] == pytest.approx(-0.01 * g / (abs(g) + 1e-8), rel=1e-12)
            assert p[0] == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-4)

    def test_reset_then_zero_grad(self):
        st = AdamState()
        p = np.array([1.0])
        adam_step(st, p, np.array([0.5]))
        adam_reset(st)
        before = p.copy()
        adam_step(st, p, np.zeros(1))
        assert np.array_equal(p, before)

    def test_reset_matches_fresh(self):
        st = AdamState()
        p1 = np.array([0.2, 0.4])
        for g in ([1.0, -1.0], [0.3, 0.3]):
            adam_step(st, p1, np.array(g))
        st.reset()
        start = p1.copy()
        adam_step(st, p1, np.array([0.7, -0.1]))
        p2 = start.copy()
        adam_step(AdamState(), p2, np.array([0.7, -0.1]))
        assert np.array_equal(p1, p2)

    def test_momentum_carryover_without_reset(self):
        st = AdamState()
        p = np.array([1.0])
        adam_step(st, p, np.array([0.5]))
        before = p.copy()
        adam_step(st, p, np.zeros(1))
        assert p[0] != before[0]

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            adam_step(AdamState(), np.zeros(3), np.zeros(2))


class TestLosses:
    def test_mse_zero(self):
        y = np.array([[0.5], [-1.0]])
        loss, g = loss_and_grad(LossKind.MSE, y.copy(), y)
        assert loss == 0.0 and not g.any()

    def test_ce_uniform_logits(self):
        loss, _ = loss_and_grad(LossKind.CROSS_ENTROPY, np.zeros((4, 10)), np.array([0, 3, 9, 5]))
        assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(DataError):
            loss_and_grad(LossKind.CROSS_ENTROPY, np.zeros((2, 3)), np.array([0, 3]))

    def test_float_targets_rejected_for_ce(self):
        with pytest.raises(DataError):
            loss_and_grad(LossKind.CROSS_ENTROPY, np.zeros((2, 3)), np.array([0.0, 1.0]))

    @pytest.mark.parametrize("kind", list(LossKind))
    def test_gradient_matches_finite_differences(self, kind, rng):
        for trial in range(10):
            B, d = rng.integers(1, 7), rng.integers(1, 5) + (kind is LossKind.CROSS_ENTROPY)
            pred = rng.normal(size=(B, d)) * 2
            if kind is LossKind.CROSS_ENTROPY:
                tgt = rng.integers(0, d, size=B)
            else:
                tgt = rng.normal(size=(B, d))
            _, g = loss_and_grad(kind, pred, tgt)
            fd = central_diff(lambda: loss_and_grad(kind, pred, tgt)[0], pred)
            assert rel_err(g, fd) < 1e-6

    @pytest.mark.parametrize("kind", list(LossKind))
    def test_per_sample_grad_is_unscaled_batch_grad(self, kind, rng):
        pred = rng.normal(size=(6, 3))
        tgt = rng.integers(0, 3, 6) if kind is LossKind.CROSS_ENTROPY else rng.normal(size=(6, 3))
        _, g = loss_and_grad(kind, pred, tgt)
        assert np.allclose(per_sample_loss_grad(kind, pred, tgt) / 6, g, rtol=0, atol=1e-15)

    def test_sigmoid_stable(self):
        s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        assert np.array_equal(s, [0.0, 0.5, 1.0])
