"""Pixel-level F1 at a fixed threshold, robustness sweeps and ensemble stability.

Per-image F1 scores are macro-averaged over images. An image whose ground
truth and binarised prediction both contain no positives scores
``empty_score`` (1.0 by default); positives predicted on an empty ground
truth score 0.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .synth import gaussian_blur, gaussian_noise, jpeg_roundtrip

log = logging.getLogger(__name__)

DEFAULT_LEVELS = {
    "jpeg_quality": [100, 95, 85, 75, 65, 55],
    "gaussian_blur": [0.0, 0.5, 1.0, 1.5, 2.0],
    "gaussian_noise": [0.0, 2 / 255, 4 / 255, 8 / 255, 16 / 255],
}
IDENTITY_LEVEL = {"jpeg_quality": 100, "gaussian_blur": 0.0, "gaussian_noise": 0.0}


def confusion(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> tuple[int, int, int]:
    """(TP, FP, FN) after binarising ``pred > threshold``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    p = pred > threshold
    g = gt > 0.5
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def pixel_f1(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5, empty_score: float = 1.0) -> float:
    tp, fp, fn = confusion(pred, gt, threshold)
    denom = 2 * tp + fp + fn
    if denom == 0:
        return float(empty_score)
    return 2 * tp / denom


def per_image_f1(preds: np.ndarray, gts: np.ndarray, threshold: float = 0.5, empty_score: float = 1.0) -> list[float]:
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape != gts.shape:
        raise ShapeError(f"predictions {preds.shape} vs ground truth {gts.shape}")
    return [pixel_f1(p, g, threshold, empty_score) for p, g in zip(preds, gts)]


@dataclass
class EvalReport:
    per_image: list[float] = field(default_factory=list)
    mean: float = float("nan")
    std: float = 0.0
    runs: list[float] = field(default_factory=list)
    curve: list[tuple[float, float]] = field(default_factory=list)
    axis: str | None = None

    @classmethod
    def from_scores(cls, scores: Sequence[float], **kw) -> "EvalReport":
        scores = [float(s) for s in scores]
        return cls(per_image=scores, mean=float(np.mean(scores)) if scores else float("nan"), **kw)


# A predictor maps a float image batch (N, H, W, 3) in [0, 1] plus a seed to
# probability maps (N, H, W).
Predictor = Callable[[np.ndarray, int], np.ndarray]


def evaluate(predict: Predictor, images: np.ndarray, masks: np.ndarray, seed: int = 0,
             threshold: float = 0.5, empty_score: float = 1.0) -> EvalReport:
    probs = predict(images, seed)
    return EvalReport.from_scores(per_image_f1(probs, masks, threshold, empty_score))


def perturb(images: np.ndarray, kind: str, level: float, seed: int = 0) -> np.ndarray:
    """Apply one degradation to a float image batch; identity levels return the input untouched."""
    if kind not in DEFAULT_LEVELS:
        raise ConfigError(f"unknown perturbation {kind!r}; expected one of {sorted(DEFAULT_LEVELS)}")
    if level == IDENTITY_LEVEL[kind]:
        return images
    if kind == "jpeg_quality":
        if not 1 <= level <= 100:
            raise ConfigError(f"JPEG quality must lie in [1, 100], got {level}")
        return np.stack([jpeg_roundtrip(im, int(level)) for im in images])
    if kind == "gaussian_blur":
        return np.stack([gaussian_blur(im, float(level)) for im in images])
    rng = np.random.default_rng([seed, 0xB10B])
    return np.stack([gaussian_noise(im, float(level), rng) for im in images])


def robustness_sweep(predict: Predictor, images: np.ndarray, masks: np.ndarray, perturbation: str,
                     levels: Sequence[float] | None = None, seed: int = 0, threshold: float = 0.5,
                     empty_score: float = 1.0) -> EvalReport:
    """Mean F1 per degradation level. Masks are never modified."""
    if perturbation not in DEFAULT_LEVELS:
        raise ConfigError(f"unknown perturbation {perturbation!r}; expected one of {sorted(DEFAULT_LEVELS)}")
    levels = list(DEFAULT_LEVELS[perturbation] if levels is None else levels)
    curve = []
    last = None
    for level in levels:
        report = evaluate(predict, perturb(images, perturbation, level, seed), masks, seed, threshold, empty_score)
        curve.append((float(level), report.mean))
        last = report
        log.info("%s=%g mean F1 %.4f", perturbation, level, report.mean)
    return EvalReport(per_image=last.per_image if last else [], mean=last.mean if last else float("nan"),
                      curve=curve, axis=perturbation)


def degradation_slope(curve: Sequence[tuple[float, float]]) -> float:
    """Least-squares slope of mean F1 against level."""
    x = np.array([c[0] for c in curve], dtype=float)
    y = np.array([c[1] for c in curve], dtype=float)
    return float(np.polyfit(x, y, 1)[0])


def ensemble_stability(make_predictor: Callable[[int], Predictor], images: np.ndarray, masks: np.ndarray,
                       n_values: Sequence[int], runs: int = 5, seeds: Sequence[int] | None = None,
                       threshold: float = 0.5, empty_score: float = 1.0) -> dict[int, EvalReport]:
    """For each ensemble size, mean +- std of the dataset mean F1 over repeated runs.

    ``make_predictor(n)`` builds a predictor with ensemble size ``n``; run ``r``
    uses ``seeds[r]`` (default ``range(runs)``).
    """
    if runs < 2:
        raise ConfigError("ensemble_stability needs runs >= 2")
    seeds = list(range(runs)) if seeds is None else list(seeds)
    if len(seeds) != runs:
        raise ConfigError(f"{len(seeds)} seeds for {runs} runs")
    out = {}
    for n in n_values:
        predict = make_predictor(n)
        means = [evaluate(predict, images, masks, s, threshold, empty_score).mean for s in seeds]
        # shifting by the first run keeps identical runs at exactly zero spread
        spread = float(np.std(np.asarray(means) - means[0]))
        out[n] = EvalReport(mean=float(np.mean(means)), std=spread, runs=means)
        log.info("N=%d mean F1 %.4f +- %.4f", n, out[n].mean, out[n].std)
    return out


# -- report files ----------------------------------------------------------

CURVE_COLUMNS = ("axis", "level", "mean_f1", "n_images")
SCORE_COLUMNS = ("index", "f1")
STABILITY_COLUMNS = ("ensemble", "run", "seed", "mean_f1")


def write_curve_csv(path: str | Path, report: EvalReport, n_images: int) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS)
        for level, score in report.curve:
            w.writerow([report.axis, f"{level:.6g}", f"{score:.6f}", n_images])
    return path


def write_scores_csv(path: str | Path, scores: Sequence[float]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCORE_COLUMNS)
        for i, s in enumerate(scores):
            w.writerow([i, f"{s:.6f}"])
    return path


def plot_curve(path: str | Path, report: EvalReport) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    xs, ys = zip(*report.curve)
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(report.axis or "level")
    ax.set_ylabel("pixel F1")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
