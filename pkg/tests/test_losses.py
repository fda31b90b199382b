import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orientsteer.losses import LossConfig, LossFamily, loss_gradient, loss_value, smooth_l1

SL = LossFamily.STEERING_LOSS
SL2 = LossFamily.STEERING_LOSS2


def fd_gradient(preds, truths, cfg, h=1e-6):
    """Central finite differences of loss_value, the independent oracle."""
    preds = np.asarray(preds, dtype=np.float64)
    grad = np.empty_like(preds)
    for i in range(preds.size):
        up = preds.copy()
        down = preds.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss_value(up, truths, cfg) - loss_value(down, truths, cfg)) / (2 * h)
    return grad


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(0.0) == 0.0

    def test_quadratic_branch(self):
        assert smooth_l1(0.5) == 0.125

    def test_linear_branch(self):
        assert smooth_l1(2.0) == 1.5

    def test_continuous_at_knee(self):
        # Both branch formulas give 0.5 at |x| = 1.
        assert smooth_l1(1.0) == 0.5
        assert 0.5 * 1.0**2 == 0.5
        assert abs(1.0) - 0.5 == 0.5

    def test_first_derivative_continuous_at_knee(self):
        eps = 1e-9
        inner = (smooth_l1(1.0) - smooth_l1(1.0 - eps)) / eps
        outer = (smooth_l1(1.0 + eps) - smooth_l1(1.0)) / eps
        assert inner == pytest.approx(1.0, abs=1e-6)
        assert outer == pytest.approx(1.0, abs=1e-6)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            smooth_l1(np.inf)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig(SL2)
        assert cfg.alpha == 1.0 and cfg.gamma == 1.0 and cfg.delta is None
        assert cfg.effective_delta() == 1.0

    def test_rejects_negative_hyperparameters(self):
        with pytest.raises(ValueError):
            LossConfig(SL, alpha=-0.1)
        with pytest.raises(ValueError):
            LossConfig(SL, gamma=-1.0)

    def test_steering_loss2_rejects_delta(self):
        with pytest.raises(ValueError):
            LossConfig(SL2, delta=1.0)

    def test_family_accepts_strings(self):
        assert LossConfig("MAE").family is LossFamily.MAE


class TestLossValue:
    def test_steering_loss2_substitution(self):
        cfg = LossConfig(SL2, alpha=1.0, gamma=1.0)
        assert loss_value([0.0], [1.0], cfg) == 1.0

    def test_steering_loss_substitution(self):
        cfg = LossConfig(SL, alpha=1.0, gamma=1.0, delta=1.0)
        assert loss_value([0.0], [1.0], cfg) == 1.0

    def test_steering_loss2_large_residual(self):
        cfg = LossConfig(SL2, alpha=1.0, gamma=1.0)
        assert loss_value([0.0], [2.0], cfg) == 4.5

    def test_steering_loss2_alpha_zero_is_mean_smooth_l1(self):
        rng = np.random.default_rng(0)
        preds = rng.normal(size=50)
        truths = rng.normal(size=50)
        cfg = LossConfig(SL2, alpha=0.0)
        expected = float(np.mean(smooth_l1(truths - preds)))
        assert loss_value(preds, truths, cfg) == pytest.approx(expected, abs=1e-15)

    def test_mae_and_mse(self):
        preds = np.array([0.0, 1.0])
        truths = np.array([1.0, 1.0])
        assert loss_value(preds, truths, LossConfig(LossFamily.MAE)) == 0.5
        assert loss_value(preds, truths, LossConfig(LossFamily.MSE)) == 0.5

    def test_rejects_length_mismatch_and_empty(self):
        cfg = LossConfig(LossFamily.MAE)
        with pytest.raises(ValueError):
            loss_value([1.0], [1.0, 2.0], cfg)
        with pytest.raises(ValueError):
            loss_value([], [], cfg)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            loss_value([np.nan], [0.0], LossConfig(LossFamily.MAE))


class TestEquivalences:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_alpha_zero_collapses(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 20))
        preds = rng.uniform(-3, 3, n)
        truths = rng.uniform(-3, 3, n)
        mse = loss_value(preds, truths, LossConfig(LossFamily.MSE))
        sl_a0 = loss_value(preds, truths, LossConfig(SL, alpha=0.0, delta=1.0))
        sl_d0 = loss_value(preds, truths, LossConfig(SL, alpha=1.0, delta=0.0))
        sl2_a0 = loss_value(preds, truths, LossConfig(SL2, alpha=0.0))
        assert abs(sl_a0 - mse / 2) <= 1e-12
        assert abs(sl_d0 - mse / 2) <= 1e-12
        assert abs(sl2_a0 - np.mean(smooth_l1(truths - preds))) <= 1e-12

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative_and_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 20))
        truths = rng.uniform(-3, 3, n)
        preds = truths + rng.uniform(-1, 1, n) * (seed % 2)
        for family in LossFamily:
            cfg = LossConfig(family)
            value = loss_value(preds, truths, cfg)
            assert value >= 0.0
            if np.array_equal(preds, truths):
                assert value == 0.0
            else:
                assert value > 0.0

    def test_weight_monotone_in_label_magnitude(self):
        # Fixed residual, growing |y|: the single-sample value must grow.
        cfg = LossConfig(SL2, alpha=1.0, gamma=1.0)
        r = 0.3
        values = [loss_value([y - r], [y], cfg) for y in (0.0, 0.2, 0.5, 1.0, 2.0)]
        assert all(b > a for a, b in zip(values, values[1:]))


class TestLossGradient:
    def test_zero_at_minimum(self):
        cfg = LossConfig(SL2)
        grad = loss_gradient([0.4, -0.2], [0.4, -0.2], cfg)
        assert np.array_equal(grad, [0.0, 0.0])

    def test_hand_differentiated_example(self):
        # Single sample, quadratic branch: loss = 2 * 0.5 * (y - p)^2,
        # d/dp = -2 (y - p) = -1 at y=1, p=0.5.
        cfg = LossConfig(SL2, alpha=1.0, gamma=1.0)
        grad = loss_gradient([0.5], [1.0], cfg)
        assert grad[0] == -1.0

    def test_mae_subgradient_zero_at_kink(self):
        grad = loss_gradient([1.0], [1.0], LossConfig(LossFamily.MAE))
        assert grad[0] == 0.0

    @pytest.mark.parametrize(
        "cfg",
        [
            LossConfig(LossFamily.MAE),
            LossConfig(LossFamily.MSE),
            LossConfig(SL, alpha=1.3, gamma=0.7, delta=1.9),
            LossConfig(SL2, alpha=0.6, gamma=2.0),
        ],
        ids=lambda cfg: cfg.family.value,
    )
    def test_matches_finite_differences(self, cfg):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(1, 10))
            truths = rng.uniform(-2, 2, n)
            residual = rng.uniform(0.01, 0.9, n) * rng.choice([-1, 1], n)
            preds = truths - residual
            analytic = loss_gradient(preds, truths, cfg)
            numeric = fd_gradient(preds, truths, cfg)
            rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-4)
            assert np.max(rel) <= 1e-5

    def test_linear_branch_gradient(self):
        # |r| > 1: d/dp of w * (|y-p| - 0.5) is -w * sign(y-p).
        cfg = LossConfig(SL2, alpha=1.0, gamma=1.0)
        grad = loss_gradient([0.0], [2.0], cfg)
        assert grad[0] == -3.0
