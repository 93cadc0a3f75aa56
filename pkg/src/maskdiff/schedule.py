"""Closed-form diffusion math: linear beta schedule, forward marginal, error prior.

Index convention: step ``t`` runs over ``1..T``; ``alpha_bars[0] == 1`` is the
clean boundary so a reverse transition into ``t = 0`` emits its clean estimate
unchanged.

All randomness enters through explicit ``eps`` / ``xi`` arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Betas for steps ``1..T`` and cumulative products padded with ``alpha_bars[0] = 1``."""

    betas: np.ndarray  # shape (T,), betas[t - 1] is beta_t
    alpha_bars: np.ndarray  # shape (T + 1,)

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        check_step(t, self.T)
        return float(self.alpha_bars[t])

    def coefficients(self, t: int | torch.Tensor, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(sqrt(abar_t), sqrt(1 - abar_t)) broadcastable against ``like``.

        ``t`` may be a python int or a 1-D tensor of per-sample steps.
        """
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            if t.shape[0] != like.shape[0]:
                raise ShapeError(f"{t.shape[0]} timesteps for batch of {like.shape[0]}")
            idx = t.detach().cpu().long().numpy()
            if idx.min() < 0 or idx.max() > self.T:
                raise IndexError(f"timestep out of range [0, {self.T}]")
            ab = torch.from_numpy(self.alpha_bars[idx]).to(like.device, like.dtype)
            ab = ab.view(-1, *([1] * (like.ndim - 1)))
            return ab.sqrt(), (1.0 - ab).sqrt()
        t = int(t)
        check_step(t, self.T)
        ab = float(self.alpha_bars[t])
        return (torch.tensor(math.sqrt(ab), dtype=like.dtype, device=like.device),
                torch.tensor(math.sqrt(1.0 - ab), dtype=like.dtype, device=like.device))


def check_step(t: int, T: int) -> None:
    if not 0 <= t <= T:
        raise IndexError(f"timestep {t} out of range [0, {T}]")


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def forward_marginal(z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor,
                     schedule: NoiseSchedule) -> torch.Tensor:
    """Sample of q(z_t | z_0): sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    a, s = schedule.coefficients(t, z0)
    return a * z0 + s * eps


@dataclass(frozen=True)
class ErrorPriorConfig:
    """Training-time perturbation of the clean latent with std ``zeta_t = sqrt(abar_t) * prior_rate``."""

    prior_rate: float = 0.1

    def __post_init__(self):
        if not self.prior_rate >= 0.0:
            raise ConfigError(f"prior rate must be non-negative, got {self.prior_rate}")

    def zeta(self, schedule: NoiseSchedule) -> np.ndarray:
        """zeta_t for t = 0..T."""
        return np.sqrt(schedule.alpha_bars) * self.prior_rate


def perturb_with_error_prior(z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, xi: torch.Tensor,
                             cfg: ErrorPriorConfig, schedule: NoiseSchedule) -> torch.Tensor:
    """Training input sqrt(abar_t) (z0 + lambda xi) + sqrt(1 - abar_t) eps."""
    if xi.shape != z0.shape:
        raise ShapeError(f"xi shape {tuple(xi.shape)} != z0 shape {tuple(z0.shape)}")
    if cfg.prior_rate == 0.0:
        return forward_marginal(z0, t, eps, schedule)
    return forward_marginal(z0 + cfg.prior_rate * xi, t, eps, schedule)
