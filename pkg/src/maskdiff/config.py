"""Experiment configuration: one YAML file with a section per component.

Unknown keys are rejected. Command-line overrides use dotted paths,
e.g. ``train.lr=5e-4`` or ``sampler.ensemble=1``; values are parsed as YAML
scalars.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .codec import CodecConfig, DistillConfig
from .denoiser import DenoiserConfig
from .errors import ConfigError
from .evaluation import DEFAULT_LEVELS
from .sampling import SamplerConfig
from .schedule import make_linear_schedule
from .synth import SynthConfig
from .training import EdgeConfig, TrainConfig


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class EvalConfig:
    threshold: float = 0.5
    empty_score: float = 1.0
    levels: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_LEVELS.items()})
    ensemble_sizes: list = field(default_factory=lambda: [1, 5])
    runs: int = 5


_SPLIT_DEFAULTS = {"train": {"count": 512, "seed": 1}, "test": {"count": 128, "seed": 2}}


@dataclass
class DataConfig:
    """Train and test splits; they differ in seed so no sample is shared."""

    train: SynthConfig = field(default_factory=lambda: SynthConfig(**_SPLIT_DEFAULTS["train"]))
    test: SynthConfig = field(default_factory=lambda: SynthConfig(**_SPLIT_DEFAULTS["test"]))

    def __post_init__(self):
        for split in ("train", "test"):
            value = getattr(self, split)
            if isinstance(value, dict):
                setattr(self, split, _build(SynthConfig, _SPLIT_DEFAULTS[split] | value, f"data.{split}"))


SECTIONS = {
    "schedule": ScheduleConfig,
    "codec": CodecConfig,
    "distill": DistillConfig,
    "edges": EdgeConfig,
    "denoiser": DenoiserConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    edges: EdgeConfig = field(default_factory=EdgeConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.sync()

    def sync(self) -> None:
        """Derive dependent fields: the diffusion latent carries the edge half only with edge supervision."""
        per_map = self.codec.latent_channels
        self.denoiser.latent_channels = 2 * per_map if self.train.edge_supervision else per_map

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad values in {where!r}: {exc}") from exc


def from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    kwargs = {}
    for key in ("seed", "output_dir"):
        if key in data:
            kwargs[key] = data.pop(key)
    for name, cls in SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data.pop(name) or {}, name)
    if data:
        raise ConfigError(f"unknown config sections: {sorted(data)}")
    return ExperimentConfig(**kwargs)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings to a nested dict in place."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a section")
        node[parts[-1]] = _scalar(raw)
    return data


def _scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        try:  # YAML 1.1 reads "5e-4" as a string
            return float(value)
        except ValueError:
            pass
    return value


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
    if overrides:
        apply_overrides(data, overrides)
    return from_dict(data)
