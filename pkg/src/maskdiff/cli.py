"""Command-line entry point.

    maskdiff synth      --config cfg.yaml           # data/train, data/test
    maskdiff distill    --config cfg.yaml [--force] # codec/codec.safetensors
    maskdiff train      --config cfg.yaml           # train/final.safetensors
    maskdiff infer      --config cfg.yaml IMAGE...  # infer/*.png, *.npy, meta.json
    maskdiff eval       --config cfg.yaml           # eval/scores.csv, report.json
    maskdiff robustness --config cfg.yaml           # robustness/<axis>.csv/.png

Every artifact directory receives the resolved config as ``config.yaml``.
Outputs are assembled in a temporary sibling directory and renamed into place.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import codec as codec_mod
from .checkpoint import load_archive, save_archive
from .config import ExperimentConfig, from_dict, load_config
from .denoiser import Denoiser
from .edges import make_edge_map
from .errors import ConfigError, InputError, ShapeError, StartupError, TrainingFault
from .evaluation import (EvalReport, ensemble_stability, evaluate, plot_curve, robustness_sweep,
                         write_curve_csv, write_scores_csv)
from .sampling import SamplerConfig, predict
from .synth import generate_dataset, load_dataset, random_masks, write_dataset
from .training import train_loop

log = logging.getLogger("maskdiff")

HANDLED = (ConfigError, ShapeError, InputError, StartupError, TrainingFault, IndexError, FileExistsError)


@contextmanager
def staged_dir(final: Path, force: bool = True):
    """Yield a temp directory that replaces ``final`` on success and is discarded on failure."""
    final = Path(final)
    if final.exists() and not force:
        raise FileExistsError(f"{final} exists; pass --force to overwrite")
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{final.name}."))
    try:
        yield tmp
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def _paths(cfg: ExperimentConfig) -> dict[str, Path]:
    root = Path(cfg.output_dir)
    return {
        "train_data": root / "data" / "train",
        "test_data": root / "data" / "test",
        "codec_dir": root / "codec",
        "codec": root / "codec" / "codec.safetensors",
        "train": root / "train",
        "checkpoint": root / "train" / "final.safetensors",
        "infer": root / "infer",
        "eval": root / "eval",
        "robustness": root / "robustness",
    }


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, splits=("train", "test"), force: bool = True) -> dict[str, Path]:
    paths = _paths(cfg)
    out = {}
    for split in splits:
        scfg = getattr(cfg.data, split)
        with staged_dir(paths[f"{split}_data"], force) as tmp:
            write_dataset(generate_dataset(scfg), tmp, scfg)
            cfg.dump(tmp / "config.yaml")
        out[split] = paths[f"{split}_data"]
        log.info("wrote %d %s samples to %s", scfg.count, split, out[split])
    return out


def mask_pool(size: int, n: int, seed: int, edge_share: float = 0.5, edges=None) -> torch.Tensor:
    """Random masks plus edge maps of a share of them, as a (N, 1, H, W) float tensor."""
    rng = np.random.default_rng([seed, 3])
    masks = random_masks(rng, n, size)
    if edge_share > 0:
        k = int(round(edge_share * n))
        kw = {} if edges is None else {"dilation_radius": edges.dilation_radius, "low": edges.low, "high": edges.high}
        masks = np.concatenate([masks, np.stack([make_edge_map(m, **kw) for m in masks[:k]])])
    return torch.from_numpy(masks.astype(np.float32))[:, None]


def cmd_distill(cfg: ExperimentConfig, force: bool = False) -> tuple[Path, dict]:
    paths = _paths(cfg)
    if paths["codec"].exists() and not force:
        raise FileExistsError(f"{paths['codec']} exists; pass --force to overwrite")
    dcfg, ccfg = cfg.distill, cfg.codec
    size = cfg.data.train.size
    torch.manual_seed(cfg.seed)
    pool = mask_pool(size, dcfg.pool_size, dcfg.seed, edges=cfg.edges)
    heldout = torch.from_numpy(random_masks(np.random.default_rng([dcfg.seed, 4]), dcfg.heldout_size, size)
                               .astype(np.float32))[:, None]
    teacher = codec_mod.SurrogateTeacher(ccfg.latent_channels, dcfg.teacher_widths, ccfg.latent_scale)
    teacher_losses = codec_mod.pretrain_teacher(teacher, pool, dcfg)
    student = codec_mod.LightVAE(ccfg)
    losses = codec_mod.distill(student, teacher, pool, dcfg)
    f1 = codec_mod.reconstruction_f1(student, heldout, cfg.eval.threshold)
    with torch.no_grad():
        zero = student.decode(torch.zeros(1, ccfg.latent_channels, size // 8, size // 8))
    report = {"reconstruction_f1": f1, "heldout_masks": len(heldout), "teacher_final_loss": teacher_losses[-1],
              "distill_final_loss": losses[-1], "decode_zero_latent": float(zero.mean())}
    with staged_dir(paths["codec_dir"], force=True) as tmp:
        save_archive(tmp / "codec.safetensors", {"codec": student, "teacher": teacher},
                     {"codec": codec_mod.codec_to_config(student), "teacher_widths": list(dcfg.teacher_widths)})
        (tmp / "report.json").write_text(json.dumps(report, indent=2))
        np.savetxt(tmp / "distill_loss.csv", np.array(losses), header="loss", comments="")
        cfg.dump(tmp / "config.yaml")
    log.info("codec round-trip F1 on %d held-out masks: %.4f", len(heldout), f1)
    return paths["codec"], report


def load_codec(path: Path) -> codec_mod.LightVAE:
    states, meta = load_archive(path)
    return codec_mod.codec_from_state(states["codec"], meta["codec"])


def _tensor_images(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def cmd_train(cfg: ExperimentConfig, data_dir: Path | None = None, codec_path: Path | None = None,
              out_dir: Path | None = None) -> Path:
    paths = _paths(cfg)
    codec_path = Path(codec_path or paths["codec"])
    if not codec_path.is_file():
        raise StartupError(f"codec checkpoint not found: {codec_path} (run `maskdiff distill` first)")
    codec = load_codec(codec_path)
    if codec.latent_channels != cfg.codec.latent_channels:
        raise ConfigError(f"codec has {codec.latent_channels} channels, config says {cfg.codec.latent_channels}")
    images, masks, _ = load_dataset(data_dir or paths["train_data"])
    cfg.sync()
    torch.manual_seed(cfg.seed)
    denoiser = Denoiser(cfg.denoiser)
    out_dir = Path(out_dir or paths["train"])
    with staged_dir(out_dir) as tmp:
        cfg.dump(tmp / "config.yaml")
        train_loop(images, masks, denoiser, codec, cfg.schedule.build(), cfg.train, cfg.edges,
                   cfg.data.train.augment, out_dir=tmp, run_config=cfg.to_dict())
    return out_dir / "final.safetensors"


def load_models(checkpoint: Path) -> tuple[Denoiser, codec_mod.LightVAE, ExperimentConfig]:
    checkpoint = Path(checkpoint)
    states, meta = load_archive(checkpoint)
    run_cfg = from_dict(meta)
    denoiser = Denoiser(run_cfg.denoiser)
    denoiser.load_state_dict(states["denoiser"])
    denoiser.eval()
    codec = codec_mod.codec_from_state(states["codec"], _dc(run_cfg.codec))
    return denoiser, codec, run_cfg


def _dc(obj) -> dict:
    return asdict(obj)


def make_predictor(denoiser, codec, sampler: SamplerConfig, schedule):
    """Predictor over float NHWC image arrays; the call-time seed replaces ``sampler.seed``."""

    def run(images: np.ndarray, seed: int) -> np.ndarray:
        scfg = SamplerConfig(**{**_dc(sampler), "seed": int(seed)})
        probs = predict(_tensor_images(images), denoiser, codec, scfg, schedule)
        return probs[:, 0].cpu().numpy()

    return run


def _float_images(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / 255.0


def _read_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise InputError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    if arr.shape[0] % 8 or arr.shape[1] % 8:
        raise ShapeError(f"{path}: dims {arr.shape[:2]} not divisible by 8")
    return arr


def _checkpoint(cfg: ExperimentConfig, checkpoint: Path | None) -> Path:
    path = Path(checkpoint or _paths(cfg)["checkpoint"])
    if not path.is_file():
        raise StartupError(f"checkpoint not found: {path} (run `maskdiff train` first)")
    return path


def cmd_infer(cfg: ExperimentConfig, images: list[Path], checkpoint: Path | None = None,
              out_dir: Path | None = None, save_probs: bool = True) -> Path:
    denoiser, codec, run_cfg = load_models(_checkpoint(cfg, checkpoint))
    schedule = run_cfg.schedule.build()
    out_dir = Path(out_dir or _paths(cfg)["infer"])
    with staged_dir(out_dir) as tmp:
        records = []
        for path in map(Path, images):
            arr = _read_image(path)
            probs = predict(_tensor_images(_float_images(arr[None])), denoiser, codec, cfg.sampler, schedule)[0, 0]
            probs = probs.cpu().numpy()
            binary = (probs > cfg.sampler.threshold).astype(np.uint8) * 255
            Image.fromarray(binary).save(tmp / f"{path.stem}.png")
            if save_probs:
                np.save(tmp / f"{path.stem}.npy", probs.astype(np.float32))
            records.append({"image": str(path), "mask": f"{path.stem}.png"})
        meta = {"sampler": _dc(cfg.sampler), "checkpoint": str(checkpoint or _paths(cfg)["checkpoint"]),
                "items": records}
        (tmp / "meta.json").write_text(json.dumps(meta, indent=2))
        cfg.dump(tmp / "config.yaml")
    return out_dir


def cmd_eval(cfg: ExperimentConfig, data_dir: Path | None = None, checkpoint: Path | None = None,
             out_dir: Path | None = None, stability: bool = False) -> EvalReport:
    denoiser, codec, run_cfg = load_models(_checkpoint(cfg, checkpoint))
    schedule = run_cfg.schedule.build()
    images, masks, _ = load_dataset(data_dir or _paths(cfg)["test_data"])
    fimages = _float_images(images)
    predictor = make_predictor(denoiser, codec, cfg.sampler, schedule)
    report = evaluate(predictor, fimages, masks, cfg.sampler.seed, cfg.eval.threshold, cfg.eval.empty_score)
    out_dir = Path(out_dir or _paths(cfg)["eval"])
    summary = {"mean_f1": report.mean, "n_images": len(report.per_image), "sampler": _dc(cfg.sampler)}
    if stability:
        runs = ensemble_stability(
            lambda n: make_predictor(denoiser, codec, SamplerConfig(**{**_dc(cfg.sampler), "ensemble": n}), schedule),
            fimages, masks, cfg.eval.ensemble_sizes, cfg.eval.runs,
            threshold=cfg.eval.threshold, empty_score=cfg.eval.empty_score)
        summary["stability"] = {str(n): {"mean": r.mean, "std": r.std, "runs": r.runs} for n, r in runs.items()}
    with staged_dir(out_dir) as tmp:
        write_scores_csv(tmp / "scores.csv", report.per_image)
        (tmp / "report.json").write_text(json.dumps(summary, indent=2))
        cfg.dump(tmp / "config.yaml")
    log.info("mean F1 %.4f over %d images", report.mean, len(report.per_image))
    return report


def cmd_robustness(cfg: ExperimentConfig, data_dir: Path | None = None, checkpoint: Path | None = None,
                   out_dir: Path | None = None, axes: list[str] | None = None) -> dict[str, EvalReport]:
    denoiser, codec, run_cfg = load_models(_checkpoint(cfg, checkpoint))
    schedule = run_cfg.schedule.build()
    images, masks, _ = load_dataset(data_dir or _paths(cfg)["test_data"])
    fimages = _float_images(images)
    predictor = make_predictor(denoiser, codec, cfg.sampler, schedule)
    axes = axes or list(cfg.eval.levels)
    out_dir = Path(out_dir or _paths(cfg)["robustness"])
    reports = {}
    with staged_dir(out_dir) as tmp:
        for axis in axes:
            if axis not in cfg.eval.levels:
                raise ConfigError(f"unknown perturbation {axis!r}")
            rep = robustness_sweep(predictor, fimages, masks, axis, cfg.eval.levels[axis], cfg.sampler.seed,
                                   cfg.eval.threshold, cfg.eval.empty_score)
            write_curve_csv(tmp / f"{axis}.csv", rep, len(images))
            plot_curve(tmp / f"{axis}.png", rep)
            reports[axis] = rep
        (tmp / "report.json").write_text(json.dumps({a: r.curve for a, r in reports.items()}, indent=2))
        cfg.dump(tmp / "config.yaml")
    return reports


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskdiff", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML experiment config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.lr=5e-4 (repeatable)")
        sp.add_argument("--out", type=Path, help="output directory (default: from config)")
        sp.add_argument("--seed", type=int)
        return sp

    def sampling(sp):
        sp.add_argument("--steps", type=int, help="inference steps")
        sp.add_argument("--ensemble", type=int, help="ensemble size N")
        sp.add_argument("--tta", action="store_true", help="horizontal-flip test-time augmentation")
        sp.add_argument("--checkpoint", type=Path)
        return sp

    s = common(sub.add_parser("synth", help="generate train/test datasets"))
    s.add_argument("--count", type=int, help="samples per split")
    s.add_argument("--split", choices=["train", "test", "both"], default="both")
    s = common(sub.add_parser("distill", help="pre-train teacher and distill the mask codec"))
    s.add_argument("--force", action="store_true")
    s = common(sub.add_parser("train", help="diffusion training"))
    s.add_argument("--data", type=Path)
    s.add_argument("--codec", type=Path)
    s = sampling(common(sub.add_parser("infer", help="predict masks for images")))
    s.add_argument("images", nargs="+", type=Path)
    s = sampling(common(sub.add_parser("eval", help="pixel F1 on a dataset")))
    s.add_argument("--data", type=Path)
    s.add_argument("--stability", action="store_true", help="also run the ensemble stability study")
    s = sampling(common(sub.add_parser("robustness", help="degradation sweeps")))
    s.add_argument("--data", type=Path)
    s.add_argument("--axis", action="append", dest="axes",
                   choices=["jpeg_quality", "gaussian_blur", "gaussian_noise"])
    return p


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.command == "synth" and args.count is not None:
        overrides += [f"data.train.count={args.count}", f"data.test.count={args.count}"]
    if getattr(args, "steps", None) is not None:
        overrides.append(f"sampler.infer_steps={args.steps}")
    if getattr(args, "ensemble", None) is not None:
        overrides.append(f"sampler.ensemble={args.ensemble}")
    if getattr(args, "tta", False):
        overrides.append("sampler.tta=true")
    if args.seed is not None:
        target = {"synth": None, "distill": "distill.seed", "train": "train.seed"}.get(args.command, "sampler.seed")
        if target:
            overrides.append(f"{target}={args.seed}")
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            if args.seed is not None:
                cfg.data.train.seed, cfg.data.test.seed = args.seed, args.seed + 1
            if args.out:
                cfg.output_dir = str(args.out)
            splits = ("train", "test") if args.split == "both" else (args.split,)
            for split, path in cmd_synth(cfg, splits).items():
                print(f"{split}: {path}")
        elif args.command == "distill":
            if args.out:
                cfg.output_dir = str(args.out)
            path, report = cmd_distill(cfg, force=args.force)
            print(f"codec: {path}  reconstruction F1 {report['reconstruction_f1']:.4f}")
        elif args.command == "train":
            print(cmd_train(cfg, args.data, args.codec, args.out))
        elif args.command == "infer":
            print(cmd_infer(cfg, args.images, args.checkpoint, args.out))
        elif args.command == "eval":
            report = cmd_eval(cfg, args.data, args.checkpoint, args.out, stability=args.stability)
            print(f"mean F1 {report.mean:.4f} over {len(report.per_image)} images")
        elif args.command == "robustness":
            for axis, rep in cmd_robustness(cfg, args.data, args.checkpoint, args.out, args.axes).items():
                print(axis, " ".join(f"{lvl:g}:{f1:.4f}" for lvl, f1 in rep.curve))
    except HANDLED as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
