"""Lightweight mask codec: 1/8-resolution latents for binary masks and edge maps.

The student (:class:`LightVAE`) is attention-free and fully convolutional. It is
distilled from a frozen teacher that consumes three-channel copies of the mask,
with objective ``L1(decode(z_s), y) + lambda_lat * MSE(z_s, z_t)``.

At desk scale the teacher is :class:`SurrogateTeacher`, a small KL-regularised
convolutional VAE pre-trained on synthetic masks. Anything exposing
``encode_rgb(x) -> latent`` with matching latent shape can stand in for it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class CodecConfig:
    latent_channels: int = 4
    latent_scale: float = 0.18215
    lambda_lat: float = 1.0
    widths: tuple[int, int, int] = (32, 64, 128)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.latent_channels < 1:
            raise ConfigError("latent_channels must be positive")
        if not self.latent_scale > 0:
            raise ConfigError("latent_scale must be > 0")
        if self.lambda_lat < 0:
            raise ConfigError("lambda_lat must be non-negative")
        if len(self.widths) != 3:
            raise ConfigError("codec needs exactly three widths (one per x2 downsampling)")


@dataclass
class DistillConfig:
    """Optimisation settings for teacher pre-training and student distillation."""

    teacher_widths: tuple[int, int, int] = (32, 64, 128)
    teacher_steps: int = 600
    teacher_kl_weight: float = 1e-4
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    pool_size: int = 2048
    heldout_size: int = 256
    seed: int = 0

    def __post_init__(self):
        self.teacher_widths = tuple(int(w) for w in self.teacher_widths)


def _conv(cin: int, cout: int, stride: int = 1, k: int = 3) -> nn.Conv2d:
    # replicate padding keeps constant inputs constant
    return nn.Conv2d(cin, cout, k, stride, k // 2, padding_mode="replicate")


def _check_divisible(x: torch.Tensor) -> None:
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise ShapeError(f"spatial dims must be divisible by 8, got {h}x{w}")


def as_mask_batch(mask) -> torch.Tensor:
    """Coerce HxW / 1xHxW / Bx1xHxW input to a float (B, 1, H, W) tensor."""
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    m = m.float()
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[None]
    if m.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"expected a single-channel mask, got shape {tuple(m.shape)}")
    return m


def clamp_unit(x: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] in the forward pass, identity gradient in the backward pass.

    A sigmoid head under an L1 loss on sparse masks saturates toward zero and
    stops learning; the straight-through clamp keeps pulling missed positives up.
    """
    return x + (x.clamp(0.0, 1.0) - x).detach()


class ConvEncoder(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, widths: tuple[int, int, int]):
        super().__init__()
        layers: list[nn.Module] = [_conv(in_channels, widths[0]), nn.SiLU()]
        prev = widths[0]
        for w in widths:
            layers += [_conv(prev, prev, stride=2), nn.SiLU(), _conv(prev, w), nn.SiLU()]
            prev = w
        layers.append(_conv(prev, out_channels, k=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ConvDecoder(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, widths: tuple[int, int, int]):
        super().__init__()
        w = list(reversed(widths))
        layers: list[nn.Module] = [_conv(in_channels, w[0]), nn.SiLU(), _conv(w[0], w[0]), nn.SiLU()]
        targets = w[1:] + [w[-1]]
        prev = w[0]
        for t in targets:
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), _conv(prev, t), nn.SiLU(), _conv(t, t), nn.SiLU()]
            prev = t
        layers.append(_conv(prev, out_channels))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class LightVAE(nn.Module):
    """Student codec. ``encode`` returns scaled latents, ``decode`` returns probabilities."""

    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or CodecConfig()
        self.encoder = ConvEncoder(1, self.cfg.latent_channels, self.cfg.widths)
        self.decoder = ConvDecoder(self.cfg.latent_channels, 1, self.cfg.widths)

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_channels

    def encode_raw(self, mask: torch.Tensor) -> torch.Tensor:
        _check_divisible(mask)
        return self.encoder(mask)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"expected {self.cfg.latent_channels} latent channels, got shape {tuple(z.shape)}")
        return clamp_unit(self.decoder(z))

    def encode(self, mask) -> torch.Tensor:
        return self.encode_raw(as_mask_batch(mask).to(self._device())) * self.cfg.latent_scale

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.ndim != 4 or latent.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"expected {self.cfg.latent_channels} latent channels, got shape {tuple(latent.shape)}")
        return self.decode_raw(latent / self.cfg.latent_scale)

    def _device(self):
        return next(self.parameters()).device


class IdentityCodec:
    """Pass-through codec used to test evaluation plumbing."""

    def encode(self, mask):
        return as_mask_batch(mask)

    def decode(self, latent):
        return latent


class Teacher(Protocol):
    def encode_rgb(self, x: torch.Tensor) -> torch.Tensor: ...


class SurrogateTeacher(nn.Module):
    """Small KL-regularised VAE on three-channel masks; latent prior N(0, (1/scale)^2)."""

    def __init__(self, latent_channels: int = 4, widths=(32, 64, 128), latent_scale: float = 0.18215):
        super().__init__()
        self.latent_channels = latent_channels
        self.prior_std = 1.0 / latent_scale
        self.encoder = ConvEncoder(3, 2 * latent_channels, tuple(widths))
        self.decoder = ConvDecoder(latent_channels, 3, tuple(widths))

    def moments(self, x):
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode_rgb(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x)
        if x.shape[1] != 3:
            raise ShapeError(f"teacher expects 3 channels, got {x.shape[1]}")
        return self.moments(x)[0]

    def decode_rgb(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z))

    def vae_loss(self, x: torch.Tensor, kl_weight: float, generator: torch.Generator | None = None):
        mean, logvar = self.moments(x)
        std = torch.exp(0.5 * logvar)
        noise = torch.randn(mean.shape, generator=generator, device=mean.device)
        z = mean + std * noise
        recon = self.decode_rgb(z)
        rec = F.binary_cross_entropy(recon, x)
        pv = self.prior_std ** 2
        kl = 0.5 * (torch.exp(logvar) / pv + mean.pow(2) / pv - 1.0 - logvar + math.log(pv)).mean()
        return rec + kl_weight * kl


def duplicate_channels(mask: torch.Tensor) -> torch.Tensor:
    """(B, 1, H, W) -> (B, 3, H, W) with three identical copies."""
    mask = as_mask_batch(mask)
    return mask.expand(-1, 3, -1, -1).contiguous()


def distill_objective(recon: torch.Tensor, mask: torch.Tensor, z_s: torch.Tensor, z_t: torch.Tensor,
                      lambda_lat: float) -> torch.Tensor:
    """Mean absolute reconstruction error plus ``lambda_lat`` times the latent MSE."""
    if z_s.shape != z_t.shape:
        raise ShapeError(f"student latent {tuple(z_s.shape)} vs teacher latent {tuple(z_t.shape)}")
    if recon.shape != mask.shape:
        raise ShapeError(f"reconstruction {tuple(recon.shape)} vs mask {tuple(mask.shape)}")
    return (recon - mask).abs().mean() + lambda_lat * (z_s - z_t).pow(2).mean()


def distill_loss(student: LightVAE, mask: torch.Tensor, teacher_latent: torch.Tensor,
                 lambda_lat: float | None = None) -> torch.Tensor:
    """Distillation loss for one batch; the teacher latent is treated as a constant."""
    lam = student.cfg.lambda_lat if lambda_lat is None else lambda_lat
    mask = as_mask_batch(mask)
    z_s = student.encode_raw(mask)
    if z_s.shape[-2:] != teacher_latent.shape[-2:]:
        raise ShapeError(f"teacher latent dims {tuple(teacher_latent.shape[-2:])} != student {tuple(z_s.shape[-2:])}")
    return distill_objective(student.decode_raw(z_s), mask, z_s, teacher_latent.detach(), lam)


def _batches(pool: torch.Tensor, steps: int, batch_size: int, rng: np.random.Generator):
    for _ in range(steps):
        idx = rng.integers(0, len(pool), size=batch_size)
        yield pool[torch.from_numpy(idx)]


def pretrain_teacher(teacher: SurrogateTeacher, pool: torch.Tensor, cfg: DistillConfig) -> list[float]:
    rng = np.random.default_rng([cfg.seed, 1])
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(teacher.parameters(), lr=cfg.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.teacher_steps, 1))
    teacher.train()
    losses = []
    for step, batch in enumerate(_batches(pool, cfg.teacher_steps, cfg.batch_size, rng)):
        loss = teacher.vae_loss(duplicate_channels(batch), cfg.teacher_kl_weight, gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 100 == 0:
            log.info("teacher step %d loss %.4f", step, losses[-1])
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return losses


def distill(student: LightVAE, teacher: Teacher, pool: torch.Tensor, cfg: DistillConfig,
            on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """Train ``student`` against the frozen ``teacher`` on random batches of ``pool``."""
    rng = np.random.default_rng([cfg.seed, 2])
    opt = torch.optim.AdamW(student.parameters(), lr=cfg.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1))
    student.train()
    losses = []
    for step, batch in enumerate(_batches(pool, cfg.steps, cfg.batch_size, rng)):
        with torch.no_grad():
            z_t = teacher.encode_rgb(duplicate_channels(batch))
        loss = distill_loss(student, batch, z_t)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, losses[-1])
        if step % 100 == 0:
            log.info("distill step %d loss %.4f", step, losses[-1])
    student.eval()
    return losses


@torch.no_grad()
def reconstruction_f1(codec, masks, threshold: float = 0.5, batch_size: int = 64) -> float:
    """Mean per-mask pixel F1 of ``decode(encode(y))`` against ``y``."""
    from .evaluation import pixel_f1

    masks = as_mask_batch(masks) if not isinstance(masks, (list, tuple)) else torch.cat([as_mask_batch(m) for m in masks])
    if len(masks) == 0:
        raise InputError("reconstruction_f1 needs at least one mask")
    scores = []
    for i in range(0, len(masks), batch_size):
        batch = masks[i:i + batch_size]
        recon = codec.decode(codec.encode(batch)).cpu()
        scores += [pixel_f1(r[0].numpy(), m[0].numpy(), threshold) for r, m in zip(recon, batch)]
    return float(np.mean(scores))


def codec_to_config(codec: LightVAE) -> dict:
    cfg = asdict(codec.cfg)
    cfg["widths"] = list(cfg["widths"])
    return cfg


def codec_from_state(state: dict[str, torch.Tensor], cfg: dict) -> LightVAE:
    codec = LightVAE(CodecConfig(**cfg))
    codec.load_state_dict(state)
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec
