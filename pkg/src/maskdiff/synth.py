"""Synthetic manipulated images and training-time augmentation.

Base images are procedural textures (smooth colour field, oriented gratings
and sensor-like grain) or random crops from a user photo folder. Tampering is
either a square copy-paste inside the same image or a region removed and
refilled by iterative neighbourhood averaging.

Every sample is a pure function of ``(seed, index)``.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, InputError, StartupError

log = logging.getLogger(__name__)

KINDS = ("copy_paste", "inpaint", "authentic")
MANIFEST_VERSION = 1


@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_blur: float = 0.2
    blur_sigma: tuple[float, float] = (0.3, 1.2)
    p_jpeg: float = 0.2
    jpeg_quality: tuple[int, int] = (50, 95)
    p_noise: float = 0.2
    noise_sigma: tuple[float, float] = (1 / 255, 6 / 255)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_hflip=0.0, p_vflip=0.0, p_blur=0.0, p_jpeg=0.0, p_noise=0.0)


@dataclass
class SynthConfig:
    count: int = 512
    size: int = 64
    authentic_ratio: float = 0.0
    inpaint_ratio: float = 0.5  # share of tampered samples
    side_range: tuple[float, float] = (0.1, 0.4)
    fill_tol: float = 1e-3
    fill_max_iter: int = 2000
    photo_dir: str | None = None
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.count < 0:
            raise ConfigError("count must be non-negative")
        if self.size % 8:
            raise ConfigError(f"size must be divisible by 8, got {self.size}")
        if not 0.0 <= self.authentic_ratio <= 1.0 or not 0.0 <= self.inpaint_ratio <= 1.0:
            raise ConfigError("ratios must lie in [0, 1]")
        lo, hi = self.side_range
        if not 0.0 < lo <= hi <= 0.5:
            raise ConfigError(f"side_range must satisfy 0 < lo <= hi <= 0.5, got {self.side_range}")


@dataclass
class SynthSample:
    image: np.ndarray  # HxWx3 uint8
    mask: np.ndarray  # HxW uint8 in {0, 1}
    manipulation_kind: str


def procedural_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Float HxWx3 texture in [0, 1]."""
    g = int(rng.integers(3, 7))
    coarse = rng.uniform(0.0, 1.0, size=(g, g, 3))
    field_ = np.stack([ndimage.zoom(coarse[..., c], size / g, order=3, mode="nearest")[:size, :size]
                       for c in range(3)], axis=-1)
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(int(rng.integers(1, 4))):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 10.0)
        amp = rng.uniform(0.02, 0.12)
        phase = rng.uniform(0, 2 * np.pi)
        wave = amp * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        field_ += wave[..., None] * rng.uniform(0.5, 1.0, size=3)
    field_ += rng.normal(0.0, rng.uniform(0.015, 0.04), size=field_.shape)
    return np.clip(field_, 0.0, 1.0)


def _photo_image(rng: np.random.Generator, paths: list[Path], size: int) -> np.ndarray:
    with Image.open(paths[int(rng.integers(len(paths)))]) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        x0, y0 = int(rng.integers(0, w - side + 1)), int(rng.integers(0, h - side + 1))
        im = im.crop((x0, y0, x0 + side, y0 + side)).resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _side_bounds(n: int, side_range: tuple[float, float]) -> tuple[int, int]:
    return int(np.ceil(side_range[0] * n)), int(np.floor(side_range[1] * n))


def copy_paste_manipulate(image: np.ndarray, rng: np.random.Generator,
                          side_range: tuple[float, float] = (0.1, 0.4)) -> SynthSample:
    """Copy a random square and paste it at a non-overlapping location."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    lo, hi = _side_bounds(min(h, w), side_range)
    if lo < 2 or hi < lo or 2 * hi > min(h, w):
        raise InputError(f"image {h}x{w} too small for squares in {side_range}")
    side = int(rng.integers(lo, hi + 1))
    for _ in range(100):
        sy, sx = rng.integers(0, h - side + 1), rng.integers(0, w - side + 1)
        ty, tx = rng.integers(0, h - side + 1), rng.integers(0, w - side + 1)
        if abs(int(sy) - int(ty)) >= side or abs(int(sx) - int(tx)) >= side:
            break
    else:
        sy, sx, ty, tx = 0, 0, h - side, w - side
    out = img.copy()
    out[ty:ty + side, tx:tx + side] = img[sy:sy + side, sx:sx + side]
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[ty:ty + side, tx:tx + side] = 1
    return SynthSample(out, mask, "copy_paste")


def random_region(rng: np.random.Generator, h: int, w: int, side_range=(0.1, 0.4)) -> np.ndarray:
    """Rotated ellipse with diameters drawn from ``side_range`` of the image side."""
    n = min(h, w)
    lo, hi = side_range[0] * n / 2, side_range[1] * n / 2
    a, b = rng.uniform(lo, hi, size=2)
    theta = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(hi, h - hi), rng.uniform(hi, w - hi)
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    region = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if not region.any():
        region[int(cy), int(cx)] = True
    return region


def boundary_pixels(region: np.ndarray) -> np.ndarray:
    """Known pixels 4-adjacent to ``region``."""
    cross = ndimage.generate_binary_structure(2, 1)
    return ndimage.binary_dilation(region, structure=cross) & ~region


def diffusion_fill(image: np.ndarray, region: np.ndarray, tol: float = 1e-3,
                   max_iter: int = 2000) -> tuple[np.ndarray, int, float]:
    """Fill ``region`` by Jacobi averaging of 4-neighbours, known pixels held fixed.

    Returns (filled image, iterations used, last max per-pixel change).
    """
    out = np.asarray(image, dtype=np.float64).copy()
    ring = boundary_pixels(region)
    if not ring.any():
        raise InputError("region has no known boundary pixels")
    out[region] = out[ring].mean(axis=0)
    delta = np.inf
    it = 0
    while it < max_iter and delta >= tol:
        p = np.pad(out, ((1, 1), (1, 1), (0, 0)), mode="edge")
        avg = 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
        delta = float(np.abs(avg[region] - out[region]).max())
        out[region] = avg[region]
        it += 1
    return out, it, delta


def inpaint_manipulate(image: np.ndarray, rng: np.random.Generator, side_range=(0.1, 0.4),
                       tol: float = 1e-3, max_iter: int = 2000) -> SynthSample:
    """Erase a random elliptical region and refill it from its surroundings."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    lo, hi = _side_bounds(min(h, w), side_range)
    if lo < 2 or hi < lo:
        raise InputError(f"image {h}x{w} too small for regions in {side_range}")
    region = random_region(rng, h, w, side_range)
    scale = 255.0 if img.dtype == np.uint8 else 1.0
    filled, _, _ = diffusion_fill(img / scale, region, tol, max_iter)
    out = img.copy()
    out[region] = _to_uint8(filled)[region] if img.dtype == np.uint8 else filled[region]
    return SynthSample(out, region.astype(np.uint8), "inpaint")


def kind_schedule(cfg: SynthConfig) -> list[str]:
    """Per-index manipulation kinds with the configured ratios met exactly."""
    n = cfg.count
    n_auth = int(round(cfg.authentic_ratio * n))
    n_inp = int(round(cfg.inpaint_ratio * (n - n_auth)))
    kinds = ["authentic"] * n_auth + ["inpaint"] * n_inp + ["copy_paste"] * (n - n_auth - n_inp)
    order = np.random.default_rng([cfg.seed, 0xC0FFEE]).permutation(n)
    return [kinds[i] for i in order]


def generate_sample(cfg: SynthConfig, index: int, kind: str, photos: list[Path] | None = None) -> SynthSample:
    rng = np.random.default_rng([cfg.seed, index])
    base = _photo_image(rng, photos, cfg.size) if photos else procedural_image(rng, cfg.size)
    base = _to_uint8(base)
    if kind == "copy_paste":
        return copy_paste_manipulate(base, rng, cfg.side_range)
    if kind == "inpaint":
        return inpaint_manipulate(base, rng, cfg.side_range, cfg.fill_tol, cfg.fill_max_iter)
    if kind == "authentic":
        return SynthSample(base, np.zeros(base.shape[:2], dtype=np.uint8), "authentic")
    raise ConfigError(f"unknown manipulation kind {kind!r}")


def _photo_paths(cfg: SynthConfig) -> list[Path] | None:
    if not cfg.photo_dir:
        return None
    paths = sorted(p for p in Path(cfg.photo_dir).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"})
    if not paths:
        raise InputError(f"no images found in {cfg.photo_dir}")
    return paths


def generate_dataset(cfg: SynthConfig) -> list[SynthSample]:
    photos = _photo_paths(cfg)
    return [generate_sample(cfg, i, k, photos) for i, k in enumerate(kind_schedule(cfg))]


def stack_samples(samples: list[SynthSample]) -> tuple[np.ndarray, np.ndarray]:
    """(N, H, W, 3) uint8 images and (N, H, W) uint8 masks."""
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def random_masks(rng: np.random.Generator, n: int, size: int, side_range=(0.1, 0.4),
                 p_empty: float = 0.1) -> np.ndarray:
    """Mask-only pool in the same shape families as the tamper generator."""
    out = np.zeros((n, size, size), dtype=np.uint8)
    lo, hi = _side_bounds(size, side_range)
    for i in range(n):
        u = rng.random()
        if u < p_empty:
            continue
        if u < p_empty + (1 - p_empty) / 2:
            side = int(rng.integers(lo, hi + 1))
            y, x = rng.integers(0, size - side + 1, size=2)
            out[i, y:y + side, x:x + side] = 1
        else:
            out[i] = random_region(rng, size, size, side_range)
    return out


# -- augmentation ----------------------------------------------------------

def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """Float HxWx3 in [0, 1] through a JPEG encode/decode at ``quality``."""
    buf = io.BytesIO()
    Image.fromarray(_to_uint8(image)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return image
    return ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="reflect")


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma <= 0:
        return image
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Random flips (shared with the mask), then blur, JPEG and noise on the image only.

    Takes and returns a float HxWx3 image in [0, 1].
    """
    cfg = cfg or AugmentConfig()
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask)
    if rng.random() < cfg.p_hflip:
        img, m = img[:, ::-1], m[:, ::-1]
    if rng.random() < cfg.p_vflip:
        img, m = img[::-1], m[::-1]
    if rng.random() < cfg.p_blur:
        img = gaussian_blur(img, rng.uniform(*cfg.blur_sigma))
    if rng.random() < cfg.p_jpeg:
        img = jpeg_roundtrip(img, int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1)))
    if rng.random() < cfg.p_noise:
        img = gaussian_noise(img, rng.uniform(*cfg.noise_sigma), rng)
    return np.ascontiguousarray(img), np.ascontiguousarray(m)


# -- on-disk dataset -------------------------------------------------------

def write_dataset(samples: list[SynthSample], out_dir: str | Path, cfg: SynthConfig) -> Path:
    """Write PNG pairs plus ``manifest.json`` (see README for the schema)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    items = []
    for i, s in enumerate(samples):
        img_name, mask_name = f"images/{i:06d}.png", f"masks/{i:06d}.png"
        Image.fromarray(s.image).save(out / img_name)
        Image.fromarray(s.mask * 255).save(out / mask_name)
        items.append({"index": i, "kind": s.manipulation_kind, "image": img_name, "mask": mask_name,
                      "seed": cfg.seed})
    cfg_dict = asdict(cfg)
    manifest = {"version": MANIFEST_VERSION, "seed": cfg.seed, "count": len(samples), "size": cfg.size,
                "config": cfg_dict, "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def read_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise StartupError(f"no manifest.json in {data_dir}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise StartupError(f"unsupported manifest version {manifest.get('version')}")
    return manifest


def load_dataset(data_dir: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Read a dataset directory back as (images uint8 NxHxWx3, masks uint8 NxHxW, manifest)."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    images, masks = [], []
    for item in manifest["items"]:
        with Image.open(data_dir / item["image"]) as im:
            images.append(np.asarray(im.convert("RGB")))
        with Image.open(data_dir / item["mask"]) as im:
            masks.append((np.asarray(im.convert("L")) > 127).astype(np.uint8))
    if not images:
        raise InputError(f"dataset {data_dir} is empty")
    return np.stack(images), np.stack(masks), manifest
