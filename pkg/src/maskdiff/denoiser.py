"""Condition encoder and latent UNet.

The condition encoder runs once per image and yields multi-scale features
plus a fusion map at latent resolution (1/8). The UNet takes the noisy
concatenated latent, the timestep and the condition and predicts the clean
latent directly. The fusion map is concatenated to the UNet input and a
per-level projection of it is added inside every encoder stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

BACKBONES: dict[str, tuple[int, int, int, int]] = {
    "tiny-conv": (16, 32, 64, 64),
    "mid-conv": (32, 64, 128, 128),
}


@dataclass
class DenoiserConfig:
    latent_channels: int = 8  # mask latent + edge latent
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    backbone: str = "tiny-conv"
    cond_channels: int = 32
    time_dim: int = 128

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        if self.base_channels < 8:
            raise ConfigError(f"base_channels must be >= 8, got {self.base_channels}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")


@dataclass
class ConditionFeatures:
    stages: list[torch.Tensor]  # 1/2, 1/4, 1/8, 1/16 resolution
    fusion: torch.Tensor  # (B, cond_channels, H/8, W/8)

    def repeat(self, n: int) -> "ConditionFeatures":
        """Tile along the batch for ``n`` ensemble members (member-major order)."""
        rep = lambda x: x.repeat(n, *([1] * (x.ndim - 1)))
        return ConditionFeatures([rep(s) for s in self.stages], rep(self.fusion))


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ConditionEncoder(nn.Module):
    """Strided four-stage convolutional backbone with a latent-resolution fusion head."""

    def __init__(self, backbone: str = "tiny-conv", cond_channels: int = 32):
        super().__init__()
        widths = BACKBONES[backbone]
        self.stem = nn.Sequential(nn.Conv2d(3, widths[0], 3, padding=1), nn.SiLU())
        stages = []
        prev = widths[0]
        for w in widths:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, w, 3, stride=2, padding=1), _norm(w), nn.SiLU(),
                nn.Conv2d(w, w, 3, padding=1), _norm(w), nn.SiLU(),
            ))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.proj = nn.ModuleList(nn.Conv2d(w, cond_channels, 1) for w in widths)
        self.fuse = nn.Sequential(_norm(cond_channels), nn.SiLU(), nn.Conv2d(cond_channels, cond_channels, 3, padding=1))

    def forward(self, image: torch.Tensor) -> ConditionFeatures:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"image dims must be divisible by 8, got {h}x{w}")
        x = self.stem(image * 2.0 - 1.0)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        size = (h // 8, w // 8)
        fused = 0
        for f, proj in zip(feats, self.proj):
            p = proj(f)
            if p.shape[-2] > size[0]:
                p = F.adaptive_avg_pool2d(p, size)
            elif p.shape[-2:] != size:
                p = F.interpolate(p, size=size, mode="nearest")
            fused = fused + p
        return ConditionFeatures(feats, self.fuse(fused))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.block1 = nn.Sequential(_norm(cin), nn.SiLU(), nn.Conv2d(cin, cout, 3, padding=1))
        self.temb = nn.Linear(time_dim, cout)
        self.block2 = nn.Sequential(_norm(cout), nn.SiLU(), nn.Conv2d(cout, cout, 3, padding=1))
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.block1(x) + self.temb(temb)[:, :, None, None]
        return self.block2(h) + self.skip(x)


class LatentUNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c, td = cfg.base_channels, cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.inp = nn.Conv2d(cfg.latent_channels + cfg.cond_channels, c, 3, padding=1)
        chans = [c * m for m in cfg.channel_mult]
        self.down_blocks = nn.ModuleList()
        self.cond_proj = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = c
        for i, ch in enumerate(chans):
            self.down_blocks.append(ResBlock(prev, ch, td))
            self.cond_proj.append(nn.Conv2d(cfg.cond_channels, ch, 1))
            last = i == len(chans) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        self.mid = ResBlock(prev, prev, td)
        self.up_blocks = nn.ModuleList()
        for ch in reversed(chans):
            self.up_blocks.append(ResBlock(prev + ch, ch, td))
            prev = ch
        self.out = nn.Sequential(_norm(prev), nn.SiLU(), nn.Conv2d(prev, cfg.latent_channels, 3, padding=1))

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, fusion: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        h = self.inp(torch.cat([z_t, fusion], dim=1))
        cond = fusion
        skips = []
        for block, proj, down in zip(self.down_blocks, self.cond_proj, self.downsample):
            if cond.shape[-2:] != h.shape[-2:]:
                cond = F.adaptive_avg_pool2d(fusion, h.shape[-2:])
            h = block(h, temb) + proj(cond)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for block in self.up_blocks:
            skip = skips.pop()
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
        return self.out(h)


class Denoiser(nn.Module):
    """Condition encoder plus latent UNet predicting the clean latent."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        self.condition_encoder = ConditionEncoder(self.cfg.backbone, self.cfg.cond_channels)
        self.unet = LatentUNet(self.cfg)

    def encode_condition(self, image: torch.Tensor) -> ConditionFeatures:
        return self.condition_encoder(image)

    def forward(self, z_t: torch.Tensor, t: int | torch.Tensor, cond: ConditionFeatures) -> torch.Tensor:
        if z_t.ndim != 4 or z_t.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"expected {self.cfg.latent_channels} latent channels, got {tuple(z_t.shape)}")
        if z_t.shape[-2:] != cond.fusion.shape[-2:] or z_t.shape[0] != cond.fusion.shape[0]:
            raise ShapeError(f"latent {tuple(z_t.shape)} does not match condition {tuple(cond.fusion.shape)}")
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((z_t.shape[0],), int(t), device=z_t.device)
        return self.unet(z_t, t.to(z_t.device), cond.fusion)


def split_latent(z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """First half of the channels is the mask latent, second half the edge latent."""
    if z.shape[1] % 2:
        raise ShapeError(f"cannot split {z.shape[1]} channels in half")
    c = z.shape[1] // 2
    return z[:, :c], z[:, c:]


def concat_latent(z_y: torch.Tensor, z_e: torch.Tensor) -> torch.Tensor:
    if z_y.shape != z_e.shape:
        raise ShapeError(f"mask latent {tuple(z_y.shape)} vs edge latent {tuple(z_e.shape)}")
    return torch.cat([z_y, z_e], dim=1)
