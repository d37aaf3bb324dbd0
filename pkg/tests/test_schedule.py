import numpy as np
import pytest
import torch

from braindiff.errors import ValidationError
from braindiff.schedule import NoiseSchedule, forward_noise, min_snr_weight, mix_signal_noise


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule.linear(1000)


class TestSchedule:
    def test_linear_schedule_shape_and_limits(self, sched):
        assert sched.num_timesteps == 1000
        assert sched.alpha_bar[0] > 0.999
        assert sched.alpha_bar[-1] < 1e-3

    def test_alpha_bar_strictly_decreasing(self, sched):
        assert np.all(np.diff(sched.alpha_bar) < 0)

    def test_snr_strictly_decreasing(self, sched):
        assert np.all(np.diff(sched.snr()) < 0)

    def test_rejects_non_monotone(self):
        with pytest.raises(ValidationError):
            NoiseSchedule(alpha_bar=np.array([0.5, 0.6, 0.4]))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            NoiseSchedule(alpha_bar=np.array([1.0, 0.5]))


class TestForwardNoise:
    def test_alpha_bar_one_returns_x0(self):
        x0 = torch.randn(2, 3, 4, 4)
        noise = torch.randn_like(x0)
        out = mix_signal_noise(x0, torch.ones(2), noise)
        torch.testing.assert_close(out, x0)

    def test_alpha_bar_zero_returns_noise(self):
        x0 = torch.randn(2, 3, 4, 4)
        noise = torch.randn_like(x0)
        out = mix_signal_noise(x0, torch.zeros(2), noise)
        torch.testing.assert_close(out, noise)

    def test_formula(self, sched):
        x0 = torch.ones(1, 1, 2, 2)
        noise = torch.full((1, 1, 2, 2), 2.0)
        t = 137
        ab = sched.alpha_bar[t]
        out = forward_noise(x0, t, noise, sched)
        expected = np.sqrt(ab) * 1.0 + np.sqrt(1 - ab) * 2.0
        torch.testing.assert_close(out, torch.full((1, 1, 2, 2), float(expected)), rtol=1e-6, atol=1e-6)

    def test_variance_monte_carlo(self):
        # Var(x_t) = ab * Var(x0) + (1 - ab) for unit-variance x0
        sched = NoiseSchedule(alpha_bar=np.array([0.25, 0.125]))
        g = torch.Generator().manual_seed(0)
        x0 = torch.randn(10_000, 1, 1, 1, generator=g)
        noise = torch.randn(10_000, 1, 1, 1, generator=g)
        x_t = forward_noise(x0, np.zeros(10_000, dtype=np.int64), noise, sched)
        var = float(x_t.var())
        assert abs(var - 1.0) < 0.05

    def test_linear_in_inputs(self, sched):
        x0 = torch.randn(1, 3, 4, 4)
        noise = torch.randn_like(x0)
        t = 250
        double = forward_noise(2 * x0, t, 2 * noise, sched)
        torch.testing.assert_close(double, 2 * forward_noise(x0, t, noise, sched))

    def test_out_of_range_t(self, sched):
        x0 = torch.zeros(1, 1, 2, 2)
        with pytest.raises(ValidationError):
            forward_noise(x0, 1000, x0, sched)
        with pytest.raises(ValidationError):
            forward_noise(x0, -1, x0, sched)


class TestMinSnrWeight:
    def test_snr_one_weight_one(self):
        sched = NoiseSchedule(alpha_bar=np.array([0.5, 0.25]), gamma=5.0)
        assert min_snr_weight(0, sched) == 1.0

    def test_snr_nine_capped(self):
        sched = NoiseSchedule(alpha_bar=np.array([0.9, 0.25]), gamma=5.0)
        assert min_snr_weight(0, sched) == pytest.approx(5.0 / 9.0, rel=1e-12)

    def test_gamma_infinite_all_ones(self):
        sched = NoiseSchedule.linear(100, gamma=1e18)
        w = min_snr_weight(np.arange(100), sched)
        assert np.all(w == 1.0)

    def test_exactly_one_below_threshold(self, sched):
        snr = sched.snr()
        w = min_snr_weight(np.arange(1000), sched)
        below = snr <= sched.gamma
        assert below.any() and (~below).any()
        assert np.all(w[below] == 1.0)

    def test_capped_product_is_gamma(self, sched):
        snr = sched.snr()
        w = min_snr_weight(np.arange(1000), sched)
        above = snr > sched.gamma
        np.testing.assert_allclose(w[above] * snr[above], sched.gamma, rtol=1e-12)

    def test_non_increasing_in_snr(self, sched):
        w = min_snr_weight(np.arange(1000), sched)
        # snr decreases with t, so weight must be non-decreasing with t
        assert np.all(np.diff(w) >= 0)
