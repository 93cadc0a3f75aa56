"""Diffusion training on mask/edge latents with the error prior.

One ``train_step``:

1. condition features from the image;
2. mask and edge latents from the frozen codec, concatenated;
3. ``t ~ U{1..T}``, ``eps, xi ~ N(0, I)``; noisy input with the error prior;
4. clean-latent prediction, split into mask/edge halves;
5. ``alpha * MSE(mask) + (1 - alpha) * MSE(edge)``.

With edge supervision disabled the model diffuses the mask latent alone and
the loss is the mask MSE.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_archive
from .denoiser import Denoiser, concat_latent, split_latent
from .edges import LossWeights, combined_latent_loss, edge_maps
from .errors import ConfigError, TrainingFault
from .schedule import ErrorPriorConfig, NoiseSchedule, perturb_with_error_prior
from .synth import AugmentConfig, augment

log = logging.getLogger(__name__)


@dataclass
class EdgeConfig:
    dilation_radius: int = 2
    low: float = 0.1
    high: float = 0.3


@dataclass
class TrainConfig:
    steps: int = 2000
    epochs: int | None = None  # overrides steps when set
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.05
    alpha: float = 0.2
    prior_rate: float = 0.1
    edge_supervision: bool = True
    grad_clip: float = 1.0
    augment: bool = True
    seed: int = 0
    log_every: int = 50
    ckpt_every: int = 0
    # "direct" trains a deterministic baseline: zero input latent at t=T, no noise
    objective: str = "diffusion"

    def __post_init__(self):
        if self.objective not in ("diffusion", "direct"):
            raise ConfigError(f"objective must be 'diffusion' or 'direct', got {self.objective!r}")
        if self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("batch_size and lr must be positive, weight_decay non-negative")
        if self.edge_supervision:
            LossWeights(self.alpha)
        ErrorPriorConfig(self.prior_rate)

    def total_steps(self, n_samples: int) -> int:
        if self.epochs is not None:
            return self.epochs * math.ceil(n_samples / self.batch_size)
        return self.steps


def sample_timesteps(n: int, T: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform draws from {1, ..., T}."""
    return torch.randint(1, T + 1, (n,), generator=generator)


def cosine_lr(step: int, total: int, peak: float) -> float:
    """Cosine decay from ``peak`` at step 0 to 0 at step ``total``."""
    return 0.5 * peak * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


def train_step(image: torch.Tensor, mask: torch.Tensor, edge: torch.Tensor, denoiser, codec,
               schedule: NoiseSchedule, cfg: TrainConfig, generator: torch.Generator | None = None):
    """Loss for one batch. Returns (loss_total, loss_seg, loss_edg) as tensors."""
    cond = denoiser.encode_condition(image)
    with torch.no_grad():
        z_y = codec.encode(mask)
        z_e = codec.encode(edge) if cfg.edge_supervision else None
    z0 = concat_latent(z_y, z_e) if cfg.edge_supervision else z_y
    if cfg.objective == "direct":
        t = torch.full((z0.shape[0],), schedule.T, dtype=torch.long, device=z0.device)
        z_t = torch.zeros_like(z0)
    else:
        t = sample_timesteps(z0.shape[0], schedule.T, generator).to(z0.device)
        eps = torch.randn(z0.shape, generator=generator).to(z0.device)
        xi = torch.randn(z0.shape, generator=generator).to(z0.device)
        z_t = perturb_with_error_prior(z0, t, eps, xi, ErrorPriorConfig(cfg.prior_rate), schedule)
    pred = denoiser(z_t, t, cond)
    if cfg.edge_supervision:
        pred_y, pred_e = split_latent(pred)
        total, seg, edg = combined_latent_loss(pred_y, pred_e, z_y, z_e, LossWeights(cfg.alpha))
    else:
        seg = F.mse_loss(pred, z_y)
        total, edg = seg, torch.zeros_like(seg)
    if not torch.isfinite(total):
        raise TrainingFault(
            f"non-finite loss (total={total.item()}, seg={seg.item()}, edg={edg.item()}); "
            f"t={t.tolist()}, |z0|max={z0.abs().max().item():.3g}, "
            f"|pred|max={pred.detach().abs().max().item():.3g}")
    return total, seg, edg


class PairSampler:
    """Random mini-batches from in-memory uint8 arrays, with augmentation and on-the-fly edge maps."""

    def __init__(self, images: np.ndarray, masks: np.ndarray, batch_size: int, seed: int,
                 augment_cfg: AugmentConfig | None, edge_cfg: EdgeConfig):
        self.images = images
        self.masks = masks
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 7])
        self.augment_cfg = augment_cfg
        self.edge_cfg = edge_cfg

    def __call__(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        idx = self.rng.integers(0, len(self.images), size=self.batch_size)
        ims, ms = [], []
        for i in idx:
            im = self.images[i].astype(np.float32) / 255.0
            m = self.masks[i]
            if self.augment_cfg is not None:
                im, m = augment(im, m, self.rng, self.augment_cfg)
            ims.append(im)
            ms.append(m)
        image = torch.from_numpy(np.stack(ims).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
        mask = torch.from_numpy(np.stack(ms).astype(np.float32))[:, None]
        edge = edge_maps(mask, self.edge_cfg.dilation_radius, self.edge_cfg.low, self.edge_cfg.high)
        return image, mask, edge


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


CURVE_COLUMNS = ("step", "lr", "loss_total", "loss_seg", "loss_edg")


def train_loop(images: np.ndarray, masks: np.ndarray, denoiser: Denoiser, codec, schedule: NoiseSchedule,
               cfg: TrainConfig, edge_cfg: EdgeConfig | None = None, augment_cfg: AugmentConfig | None = None,
               out_dir: str | Path | None = None, run_config: dict | None = None) -> TrainResult:
    """AdamW with cosine decay to zero; the codec stays frozen throughout.

    With ``out_dir`` set, writes ``loss.csv``, periodic ``ckpt_<step>.safetensors``
    and ``final.safetensors`` (denoiser + codec weights, ``run_config`` in the header).
    """
    edge_cfg = edge_cfg or EdgeConfig()
    for p in codec.parameters():
        p.requires_grad_(False)
    codec.eval()
    denoiser.train()

    total = cfg.total_steps(len(images))
    sampler = PairSampler(images, masks, cfg.batch_size, cfg.seed,
                          (augment_cfg or AugmentConfig()) if cfg.augment else None, edge_cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(denoiser.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cosine_lr(s, total, 1.0))
    device = next(denoiser.parameters()).device

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = (out / "loss.csv").open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
    config = run_config or {"train": asdict(cfg)}

    result = TrainResult()
    try:
        for step in range(total):
            image, mask, edge = (x.to(device) for x in sampler())
            lr = opt.param_groups[0]["lr"]
            loss, seg, edg = train_step(image, mask, edge, denoiser, codec, schedule, cfg, gen)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if any(p.grad is not None for p in codec.parameters()):
                raise TrainingFault("codec received gradients during diffusion training")
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(denoiser.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            row = {"step": step, "lr": lr, "loss_total": loss.item(), "loss_seg": seg.item(), "loss_edg": edg.item()}
            result.history.append(row)
            if writer is not None:
                writer.writerow([step, f"{lr:.6g}", f"{row['loss_total']:.6g}", f"{row['loss_seg']:.6g}",
                                 f"{row['loss_edg']:.6g}"])
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d lr %.2e loss %.4f (seg %.4f, edg %.4f)", step, lr, row["loss_total"],
                         row["loss_seg"], row["loss_edg"])
            if out is not None and cfg.ckpt_every and step and step % cfg.ckpt_every == 0:
                save_archive(out / f"ckpt_{step:06d}.safetensors", {"denoiser": denoiser, "codec": codec}, config)
    finally:
        if writer is not None:
            fh.close()
    denoiser.eval()
    if out is not None:
        result.checkpoint = save_archive(out / "final.safetensors", {"denoiser": denoiser, "codec": codec}, config)
    return result
