"""Noise schedule, forward noising, and min-SNR loss weights.

The schedule stores the cumulative signal fraction ``alpha_bar`` per
training timestep; ``snr(t) = alpha_bar / (1 - alpha_bar)`` decreases
strictly in t. The per-timestep loss weight is ``min(snr, gamma) / snr``,
which is exactly 1 wherever snr <= gamma and damps easy high-SNR steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    gamma: float = 5.0

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.ndim != 1 or ab.shape[0] < 1:
            raise ValidationError("alpha_bar must be a nonempty 1-D vector")
        if np.any(ab <= 0.0) or np.any(ab >= 1.0):
            raise ValidationError("alpha_bar values must lie strictly in (0, 1)")
        if np.any(np.diff(ab) >= 0.0):
            raise ValidationError("alpha_bar must be strictly decreasing")
        if not (self.gamma > 0):
            raise ValidationError(f"gamma must be > 0, got {self.gamma}")

    @property
    def num_timesteps(self) -> int:
        return self.alpha_bar.shape[0]

    def snr(self) -> np.ndarray:
        return self.alpha_bar / (1.0 - self.alpha_bar)

    @classmethod
    def linear(
        cls,
        num_timesteps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        gamma: float = 5.0,
    ) -> "NoiseSchedule":
        """Cumulative product of (1 - beta) over a linear beta ramp."""
        betas = np.linspace(beta_start, beta_end, num_timesteps, dtype=np.float64)
        return cls(alpha_bar=np.cumprod(1.0 - betas), gamma=gamma)


def _check_timesteps(t: np.ndarray, num_timesteps: int) -> None:
    if np.any(t < 0) or np.any(t >= num_timesteps):
        raise ValidationError(f"timestep out of range [0, {num_timesteps}): {t}")


def mix_signal_noise(x0: torch.Tensor, alpha_bar: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * noise, broadcast over trailing dims."""
    while alpha_bar.ndim < x0.ndim:
        alpha_bar = alpha_bar.unsqueeze(-1)
    return torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * noise


def forward_noise(
    x0: torch.Tensor,
    t: int | np.ndarray | torch.Tensor,
    noise: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Noised image x_t for batch timesteps t (scalar or per-sample vector)."""
    if x0.shape != noise.shape:
        raise ValidationError(f"x0 {tuple(x0.shape)} and noise {tuple(noise.shape)} must match")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    _check_timesteps(t_arr, sched.num_timesteps)
    ab = torch.as_tensor(sched.alpha_bar[t_arr], dtype=x0.dtype, device=x0.device)
    if ab.shape[0] == 1 and x0.shape[0] != 1:
        ab = ab.expand(x0.shape[0])
    elif ab.shape[0] != x0.shape[0]:
        raise ValidationError(f"got {ab.shape[0]} timesteps for batch of {x0.shape[0]}")
    return mix_signal_noise(x0, ab, noise)


def min_snr_weight(t: int | np.ndarray, sched: NoiseSchedule) -> float | np.ndarray:
    """min(snr_t, gamma) / snr_t; exactly 1.0 wherever snr_t <= gamma."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    _check_timesteps(t_arr, sched.num_timesteps)
    snr = sched.snr()[t_arr]
    w = np.where(snr <= sched.gamma, 1.0, sched.gamma / snr)
    return float(w[0]) if np.isscalar(t) or np.ndim(t) == 0 else w
