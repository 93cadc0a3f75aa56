"""Deterministic DDIM (sigma = 0) over respaced steps, ensemble averaging in latent space, flip TTA."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .denoiser import split_latent
from .errors import ConfigError, ShapeError
from .schedule import NoiseSchedule, check_step


@dataclass
class SamplerConfig:
    infer_steps: int = 8
    ensemble: int = 5
    threshold: float = 0.5
    tta: bool = False
    seed: int = 0
    batch_size: int = 64
    zero_init: bool = False  # start from a zero latent (deterministic baselines)

    def __post_init__(self):
        if self.infer_steps < 1:
            raise ConfigError(f"infer_steps must be >= 1, got {self.infer_steps}")
        if self.ensemble < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {self.ensemble}")


def respace_steps(T: int, n: int) -> list[int]:
    """``n`` descending steps ``T, T - k, ..., T - (n - 1) k`` with stride ``k = T // n``.

    The chain then jumps from the last entry to the clean boundary ``t = 0``.
    """
    if not 1 <= n <= T:
        raise ConfigError(f"need 1 <= inference steps <= T, got n={n}, T={T}")
    stride = T // n
    return [T - i * stride for i in range(n)]


def ddim_step(z_t: torch.Tensor, z0_pred: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Move from step ``t`` to ``t_prev`` along the deterministic DDIM path through ``z0_pred``."""
    if z_t.shape != z0_pred.shape:
        raise ShapeError(f"z_t {tuple(z_t.shape)} vs z0_pred {tuple(z0_pred.shape)}")
    if t <= t_prev:
        raise IndexError(f"reverse step needs t > t_prev, got {t} -> {t_prev}")
    check_step(t, schedule.T)
    check_step(t_prev, schedule.T)
    ab_t = float(schedule.alpha_bars[t])
    ab_prev = float(schedule.alpha_bars[t_prev])
    if ab_t >= 1.0:
        raise ZeroDivisionError(f"alpha_bar at step {t} is 1; noise estimate undefined")
    eps_hat = (z_t - math.sqrt(ab_t) * z0_pred) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_prev) * z0_pred + math.sqrt(1.0 - ab_prev) * eps_hat


def _latent_shape(denoiser, cond, image: torch.Tensor) -> tuple[int, int, int, int]:
    h, w = cond.fusion.shape[-2:]
    return (image.shape[0], denoiser.cfg.latent_channels, h, w)


@torch.no_grad()
def sample_latents(image: torch.Tensor, denoiser, cfg: SamplerConfig, schedule: NoiseSchedule,
                   generator: torch.Generator | None = None, reduce: bool = True) -> torch.Tensor:
    """Run ``cfg.ensemble`` reverse chains per image.

    Returns the ensemble-mean final latent (B, C, h, w), or with
    ``reduce=False`` every chain's final latent (N, B, C, h, w).
    """
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    cond = denoiser.encode_condition(image)  # once per call, shared by all chains
    b, c, h, w = _latent_shape(denoiser, cond, image)
    n = cfg.ensemble
    if cfg.zero_init:
        z = torch.zeros((n, b, c, h, w), device=image.device)
    else:
        z = torch.randn((n, b, c, h, w), generator=generator).to(image.device)
    z = z.reshape(n * b, c, h, w)
    cond_n = cond.repeat(n) if n > 1 else cond
    steps = respace_steps(schedule.T, cfg.infer_steps)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        z0_pred = denoiser(z, torch.full((n * b,), t, device=z.device, dtype=torch.long), cond_n)
        z = ddim_step(z, z0_pred, t, t_prev, schedule)
    chains = z.reshape(n, b, c, h, w)
    if not reduce:
        return chains
    total = torch.zeros_like(chains[0])
    for member in chains:  # fixed-order reduction
        total = total + member
    return total / n


def mask_latent(z: torch.Tensor, codec_channels: int) -> torch.Tensor:
    """Mask half of a joint mask/edge latent; the edge half is dropped."""
    if z.shape[1] == codec_channels:
        return z
    z_y, _ = split_latent(z)
    if z_y.shape[1] != codec_channels:
        raise ShapeError(f"latent with {z.shape[1]} channels does not match codec ({codec_channels})")
    return z_y


@torch.no_grad()
def infer(image: torch.Tensor, denoiser, codec, cfg: SamplerConfig, schedule: NoiseSchedule,
          generator: torch.Generator | None = None) -> torch.Tensor:
    """Probability maps (B, 1, H, W) for a (B, 3, H, W) image batch in [0, 1]."""
    z = sample_latents(image, denoiser, cfg, schedule, generator)
    return codec.decode(mask_latent(z, codec.latent_channels))


def hflip(x: torch.Tensor) -> torch.Tensor:
    return torch.flip(x, dims=[-1])


def fuse_flip(pred: torch.Tensor, pred_of_flipped: torch.Tensor) -> torch.Tensor:
    """Average a prediction with the flipped-back prediction of the mirrored input."""
    return 0.5 * (pred + hflip(pred_of_flipped))


@torch.no_grad()
def tta_infer(image: torch.Tensor, denoiser, codec, cfg: SamplerConfig, schedule: NoiseSchedule,
              generator: torch.Generator | None = None) -> torch.Tensor:
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    p = infer(image, denoiser, codec, cfg, schedule, generator)
    p_flip = infer(hflip(image), denoiser, codec, cfg, schedule, generator)
    return fuse_flip(p, p_flip)


def predict(image: torch.Tensor, denoiser, codec, cfg: SamplerConfig, schedule: NoiseSchedule,
            generator: torch.Generator | None = None) -> torch.Tensor:
    """``infer`` or ``tta_infer`` per ``cfg.tta``, in mini-batches of ``cfg.batch_size``.

    A single generator seeded from ``cfg.seed`` feeds all batches in order.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    fn = tta_infer if cfg.tta else infer
    outs = [fn(image[i:i + cfg.batch_size], denoiser, codec, cfg, schedule, generator)
            for i in range(0, len(image), cfg.batch_size)]
    return torch.cat(outs)
