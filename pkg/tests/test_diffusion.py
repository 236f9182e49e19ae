"""Noise schedule, forward marginal, reverse chain."""

import numpy as np
import pytest
import torch

from emoface.diffusion import (
    DiffusionSchedule,
    cfg_combine,
    forward_marginal,
    make_schedule,
    predict_x0,
    reverse_step,
    sample_loop,
)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule(400)


class TestSchedule:
    def test_linear_endpoints(self, schedule):
        assert schedule.beta(1) == pytest.approx(1e-4)
        assert schedule.beta(400) == pytest.approx(0.02)
        assert np.allclose(np.diff(schedule.betas), schedule.betas[1] - schedule.betas[0])

    def test_alpha_bar_is_cumulative_product(self, schedule):
        prod = 1.0
        for t in range(1, 401):
            prod *= 1.0 - schedule.beta(t)
            assert schedule.alpha_bar(t) == pytest.approx(prod, rel=1e-12)
        assert schedule.alpha_bar(400) < 0.05

    def test_sigma_first_step_is_zero(self, schedule):
        assert schedule.sigma(1) == 0.0
        assert schedule.sigma(2) > 0.0

    def test_sigma_formula(self, schedule):
        for t in (2, 17, 400):
            expected = np.sqrt(
                schedule.beta(t)
                * (1.0 - schedule.alpha_bar(t - 1))
                / (1.0 - schedule.alpha_bar(t))
            )
            assert schedule.sigma(t) == pytest.approx(expected, rel=1e-12)

    def test_t_bounds(self, schedule):
        for bad in (0, 401, -3):
            with pytest.raises(ValueError):
                schedule.alpha_bar(bad)

    def test_invalid_construction(self):
        with pytest.raises(ValueError):
            make_schedule(0)
        with pytest.raises(ValueError):
            make_schedule(10, beta_start=0.5, beta_end=0.1)


class TestForwardMarginal:
    def test_monte_carlo_moments(self, schedule):
        # empirical mean and variance of z_t against the closed form, 3 sigma
        rng = np.random.default_rng(42)
        z0 = torch.from_numpy(rng.normal(size=(1, 4, 2))).double()
        gen = torch.Generator().manual_seed(1234)
        draws = 4000
        for t in sorted(rng.choice(np.arange(1, 401), size=10, replace=False)):
            ab = schedule.alpha_bar(int(t))
            eps = torch.randn((draws,) + tuple(z0.shape[1:]), generator=gen, dtype=torch.float64)
            zt = forward_marginal(schedule, z0.expand(draws, -1, -1), int(t), eps)
            sample_mean = zt.mean(dim=0).numpy()
            expected_mean = (np.sqrt(ab) * z0[0]).numpy()
            se_mean = np.sqrt((1.0 - ab) / draws)
            assert np.abs(sample_mean - expected_mean).max() <= 3.0 * se_mean
            sample_var = zt.var(dim=0, unbiased=True).numpy()
            se_var = (1.0 - ab) * np.sqrt(2.0 / (draws - 1))
            assert np.abs(sample_var - (1.0 - ab)).max() <= 3.0 * se_var

    def test_tensor_timesteps_match_scalar(self, schedule):
        z0 = torch.randn(3, 5, 2, dtype=torch.float64)
        eps = torch.randn_like(z0)
        t = torch.tensor([1, 200, 400])
        batched = forward_marginal(schedule, z0, t, eps)
        for i, ti in enumerate(t.tolist()):
            single = forward_marginal(schedule, z0[i : i + 1], ti, eps[i : i + 1])
            assert torch.equal(batched[i], single[0])

    def test_shape_mismatch(self, schedule):
        with pytest.raises(ValueError):
            forward_marginal(schedule, torch.zeros(2, 3), 1, torch.zeros(2, 4))


class TestReverseChain:
    def test_round_trip_oracle(self, schedule):
        # feeding the state-implied noise at every step must walk back to z0
        torch.manual_seed(0)
        z0 = torch.randn(1, 6, 4, dtype=torch.float64)
        gen = torch.Generator().manual_seed(7)
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
        z = forward_marginal(schedule, z0, 400, eps)
        for t in range(400, 0, -1):
            ab = schedule.alpha_bar(t)
            eps_implied = (z - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)
            noise = torch.randn(z.shape, generator=gen, dtype=torch.float64) if t > 1 else None
            z = reverse_step(schedule, z, t, eps_implied, noise)
        rms = float(torch.sqrt(((z - z0) ** 2).mean()))
        assert rms <= 1e-3

    def test_x0_prediction_inverts_marginal(self, schedule):
        z0 = torch.randn(2, 3, 4, dtype=torch.float64)
        eps = torch.randn_like(z0)
        for t in (1, 137, 400):
            zt = forward_marginal(schedule, z0, t, eps)
            back = predict_x0(schedule, zt, t, eps)
            assert torch.allclose(back, z0, atol=1e-10)

    def test_reverse_step_formula(self, schedule):
        z = torch.randn(1, 2, 2, dtype=torch.float64)
        eps_hat = torch.randn_like(z)
        noise = torch.randn_like(z)
        t = 57
        got = reverse_step(schedule, z, t, eps_hat, noise)
        alpha, beta, ab = schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t)
        mean = (z - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
        expected = mean + schedule.sigma(t) * noise
        assert torch.allclose(got, expected, atol=1e-12)

    def test_final_step_deterministic(self, schedule):
        z = torch.randn(1, 2, 2)
        eps_hat = torch.randn_like(z)
        a = reverse_step(schedule, z, 1, eps_hat)
        b = reverse_step(schedule, z, 1, eps_hat, torch.randn_like(z))
        assert torch.equal(a, b)

    def test_noise_required_above_one(self, schedule):
        z = torch.randn(1, 2, 2)
        with pytest.raises(ValueError):
            reverse_step(schedule, z, 5, torch.randn_like(z))

    def test_zero_estimate_variance_recursion(self):
        # with eps_hat = 0 the chain is linear: v_{t-1} = v_t / alpha_t + sigma_t^2
        schedule = make_schedule(40)
        gen = torch.Generator().manual_seed(3)
        draws, numel = 3000, 8
        z = torch.randn(draws, numel, 1, generator=gen, dtype=torch.float64)
        v = 1.0
        for t in range(schedule.num_steps, 0, -1):
            noise = torch.randn(z.shape, generator=gen, dtype=torch.float64) if t > 1 else None
            z = reverse_step(schedule, z, t, torch.zeros_like(z), noise)
            v = v / schedule.alpha(t) + schedule.sigma(t) ** 2
        sample_var = float(z.var())
        se = v * np.sqrt(2.0 / (draws * numel - 1))
        assert abs(sample_var - v) <= 4.0 * se


class TestGuidance:
    def test_weight_one_is_conditional(self):
        a, b = torch.randn(2, 3), torch.randn(2, 3)
        assert torch.equal(cfg_combine(a, b, 1.0), a)

    def test_weight_zero_is_unconditional(self):
        a, b = torch.randn(2, 3), torch.randn(2, 3)
        assert torch.allclose(cfg_combine(a, b, 0.0), b)

    def test_combination_formula(self):
        a, b = torch.randn(4, 2, dtype=torch.float64), torch.randn(4, 2, dtype=torch.float64)
        s = 2.0
        assert torch.allclose(cfg_combine(a, b, s), s * a + (1 - s) * b, atol=1e-15)

    def test_nonfinite_weight_rejected(self):
        a = torch.zeros(1)
        with pytest.raises(ValueError):
            cfg_combine(a, a, float("nan"))

    def test_sample_loop_deterministic_and_branching(self):
        schedule = make_schedule(30)
        calls = []

        def fake_denoiser(z, t, conditional):
            calls.append((t, conditional))
            return torch.zeros_like(z)

        gen = torch.Generator().manual_seed(99)
        out1 = sample_loop(schedule, fake_denoiser, (2, 4, 3), 2.0, gen)
        # both branches get called for every one of the 30 steps
        assert len(calls) == 60
        assert {c for c in calls if c[1]} == {(t, True) for t in range(1, 31)}
        gen2 = torch.Generator().manual_seed(99)
        out2 = sample_loop(schedule, fake_denoiser, (2, 4, 3), 2.0, gen2)
        assert torch.equal(out1, out2)
        gen3 = torch.Generator().manual_seed(100)
        out3 = sample_loop(schedule, fake_denoiser, (2, 4, 3), 2.0, gen3)
        assert not torch.equal(out1, out3)
