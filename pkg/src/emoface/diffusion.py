"""Denoising diffusion over expression-coefficient sequences.

The process is the standard discrete-time Gaussian chain with a linear beta
schedule. Timesteps are 1-indexed: ``t`` runs from 1 (least noisy) to
``num_steps`` (most noisy); ``alpha_bar(t)`` is the cumulative product of
``1 - beta`` up to and including step ``t``.

Guided sampling runs the denoiser twice per step (conditional and
unconditional branches) and combines the noise estimates as

    eps = weight * eps_cond + (1 - weight) * eps_uncond

so ``weight = 1`` is plain conditional sampling and larger weights push the
output toward the conditioning signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_NUM_STEPS = 400
BETA_START = 1e-4
BETA_END = 0.02


@dataclass
class DiffusionSchedule:
    """Precomputed per-step constants of the noise process (float64)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"t must be in [1, {self.num_steps}], got {t}")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check_t(t) - 1])

    def sigma(self, t: int) -> float:
        """Reverse-step noise scale; zero at the final step t=1."""
        t = self._check_t(t)
        if t == 1:
            return 0.0
        prev = self.alpha_bars[t - 2]
        var = self.betas[t - 1] * (1.0 - prev) / (1.0 - self.alpha_bars[t - 1])
        return float(np.sqrt(var))


def make_schedule(num_steps: int = DEFAULT_NUM_STEPS,
                  beta_start: float = BETA_START,
                  beta_end: float = BETA_END) -> DiffusionSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def forward_marginal(schedule: DiffusionSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Sample ``z_t`` given ``z_0`` and the noise draw ``eps``.

    ``t`` is an int or a per-sample long tensor matching the batch dimension.
    """
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} must match z0 shape {tuple(z0.shape)}")
    ab = _gather_alpha_bar(schedule, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def predict_x0(schedule: DiffusionSchedule, z_t: torch.Tensor, t, eps_hat: torch.Tensor) -> torch.Tensor:
    """Invert the forward marginal around a noise estimate."""
    ab = _gather_alpha_bar(schedule, t, z_t)
    return (z_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def _gather_alpha_bar(schedule: DiffusionSchedule, t, ref: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        if t.ndim != 1 or t.shape[0] != ref.shape[0]:
            raise ValueError("tensor t must be 1-d with one entry per batch element")
        if bool((t < 1).any()) or bool((t > schedule.num_steps).any()):
            raise ValueError(f"t values must be in [1, {schedule.num_steps}]")
        ab = torch.from_numpy(schedule.alpha_bars).to(ref.dtype)[t - 1]
        return ab.view(-1, *([1] * (ref.ndim - 1)))
    return torch.as_tensor(schedule.alpha_bar(int(t)), dtype=ref.dtype)


def reverse_step(
    schedule: DiffusionSchedule,
    z_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral step from ``z_t`` to ``z_{t-1}``.

    At ``t = 1`` the step is deterministic and ``noise`` is ignored.
    """
    t = schedule._check_t(t)
    if eps_hat.shape != z_t.shape:
        raise ValueError("eps_hat must match z_t in shape")
    alpha = schedule.alpha(t)
    beta = schedule.beta(t)
    ab = schedule.alpha_bar(t)
    mean = (z_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    sigma = schedule.sigma(t)
    if sigma == 0.0:
        return mean
    if noise is None:
        raise ValueError("noise draw required for t > 1")
    if noise.shape != z_t.shape:
        raise ValueError("noise must match z_t in shape")
    return mean + sigma * noise


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, weight: float) -> torch.Tensor:
    """Guided noise estimate: ``weight * cond + (1 - weight) * uncond``."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional and unconditional estimates must match in shape")
    if not np.isfinite(weight):
        raise ValueError(f"weight must be finite, got {weight}")
    return weight * eps_cond + (1.0 - weight) * eps_uncond


def sample_loop(
    schedule: DiffusionSchedule,
    denoise_fn,
    shape: tuple[int, ...],
    weight: float,
    generator: torch.Generator,
    callback=None,
) -> torch.Tensor:
    """Draw a batch by running the full reverse chain with guidance.

    ``denoise_fn(z_t, t, conditional)`` must return the noise estimate for the
    whole batch with ``conditional`` toggling the prompt branch; the loop calls
    it twice per step and mixes the two estimates. All stochastic draws come
    from ``generator``, so a fixed seed reproduces the output bit-for-bit.
    """
    z = torch.randn(shape, generator=generator)
    for t in range(schedule.num_steps, 0, -1):
        eps_c = denoise_fn(z, t, True)
        eps_u = denoise_fn(z, t, False)
        eps = cfg_combine(eps_c, eps_u, weight)
        noise = torch.randn(shape, generator=generator) if t > 1 else None
        z = reverse_step(schedule, z, t, eps, noise)
        if callback is not None:
            callback(t, z)
    return z
