"""Tamper-boundary edge maps and the combined mask/edge latent loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError, ShapeError

_TAN_22_5 = np.tan(np.deg2rad(22.5))


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(img, 1, mode="edge")
    dx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    dy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return dx, dy


def canny(img: np.ndarray, low: float, high: float) -> np.ndarray:
    """Canny edges with 3x3 Sobel, L1 magnitude, absolute thresholds.

    No pre-smoothing: inputs here are binary masks. Non-maximum suppression
    breaks ties toward the lower/right neighbour, so a step edge yields a
    one-pixel line.
    """
    img = np.asarray(img, dtype=np.float64)
    dx, dy = _sobel(img)
    mag = np.abs(dx) + np.abs(dy)
    h, w = mag.shape
    m = np.pad(mag, 1)  # zero border: borders never suppress

    c = m[1:-1, 1:-1]
    left, right = m[1:-1, :-2], m[1:-1, 2:]
    up, down = m[:-2, 1:-1], m[2:, 1:-1]
    ul, ur = m[:-2, :-2], m[:-2, 2:]
    dl, dr = m[2:, :-2], m[2:, 2:]

    ax, ay = np.abs(dx), np.abs(dy)
    horiz = ay < _TAN_22_5 * ax
    vert = ay > ax / _TAN_22_5
    diag = ~(horiz | vert)
    same_sign = (dx * dy) >= 0  # gradient along the main diagonal

    keep = np.zeros((h, w), dtype=bool)
    keep |= horiz & (c > left) & (c >= right)
    keep |= vert & (c > up) & (c >= down)
    keep |= diag & same_sign & (c > ul) & (c > dr)
    keep |= diag & ~same_sign & (c > ur) & (c > dl)

    strong = keep & (mag > high)
    weak = keep & (mag > low)
    if not strong.any():
        return np.zeros((h, w), dtype=bool)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    hit = np.unique(labels[strong])
    return np.isin(labels, hit[hit > 0])


def make_edge_map(mask: np.ndarray, dilation_radius: int = 2, low: float = 0.1, high: float = 0.3) -> np.ndarray:
    """Dilated Canny boundary of a binary mask, as a uint8 {0,1} map.

    ``low``/``high`` are fractions of the largest gradient magnitude present;
    the structuring element is a square of side ``2 * dilation_radius + 1``.
    """
    if dilation_radius < 1:
        raise ConfigError(f"dilation radius must be >= 1, got {dilation_radius}")
    if not 0.0 <= low <= high:
        raise ConfigError(f"need 0 <= low <= high, got {low}, {high}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeError(f"expected an HxW mask, got shape {mask.shape}")
    dx, dy = _sobel(mask)
    top = (np.abs(dx) + np.abs(dy)).max()
    if top == 0:
        return np.zeros(mask.shape, dtype=np.uint8)
    edges = canny(mask, low * top, high * top)
    k = 2 * dilation_radius + 1
    return ndimage.binary_dilation(edges, structure=np.ones((k, k), dtype=bool)).astype(np.uint8)


def edge_maps(masks: torch.Tensor, dilation_radius: int = 2, low: float = 0.1, high: float = 0.3) -> torch.Tensor:
    """Batched ``make_edge_map`` for (B, 1, H, W) mask tensors."""
    arr = masks.detach().cpu().numpy()
    out = np.stack([make_edge_map(m[0], dilation_radius, low, high) for m in arr])[:, None]
    return torch.from_numpy(out).to(masks.device, masks.dtype)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"segmentation weight must lie in (0, 1), got {self.alpha}")


def combined_latent_loss(pred_y: torch.Tensor, pred_e: torch.Tensor, tgt_y: torch.Tensor, tgt_e: torch.Tensor,
                         w: LossWeights) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (total, seg, edge) with total = alpha * seg + (1 - alpha) * edge, both MSE."""
    if pred_y.shape != tgt_y.shape or pred_e.shape != tgt_e.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred_y.shape)}/{tuple(tgt_y.shape)}, "
                         f"{tuple(pred_e.shape)}/{tuple(tgt_e.shape)}")
    seg = F.mse_loss(pred_y, tgt_y)
    edg = F.mse_loss(pred_e, tgt_e)
    return w.alpha * seg + (1.0 - w.alpha) * edg, seg, edg
