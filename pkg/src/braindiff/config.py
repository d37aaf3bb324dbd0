"""Experiment configuration: YAML-backed, validated, hashable for run dirs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .encoder import EncoderConfig
from .errors import ConfigError
from .training import TrainConfig


@dataclass(frozen=True)
class AtlasSpec:
    """Synthetic atlas layout (ignored when atlas_path is given)."""

    n_low: int = 4
    n_high: int = 4
    n_noise: int = 8
    vertex_min: int = 6
    vertex_max: int = 12
    seed: int = 0


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"  # "synthetic" | "archive"
    n_train: int = 160
    n_test: int = 100
    resolution: int = 32
    noise_std: float = 0.25
    atlas: AtlasSpec = field(default_factory=AtlasSpec)
    atlas_path: Optional[str] = None
    train_archive: Optional[str] = None
    test_archive: Optional[str] = None
    train_scenes: Optional[str] = None
    test_scenes: Optional[str] = None


@dataclass(frozen=True)
class ModelSpec:
    token_dim: int = 768
    base_channels: int = 64
    depth: int = 2
    heads: int = 4
    head_dim: int = 64
    time_dim: int = 256


@dataclass(frozen=True)
class ScheduleSpec:
    timesteps: int = 1000
    gamma: float = 5.0
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class SampleSpec:
    steps: int = 50
    candidates: int = 8
    guidance_scale: float = 0.0
    interpret_timesteps: int = 8


@dataclass(frozen=True)
class AblateSpec:
    parcel_counts: tuple[int, ...] = (2, 4, 8)  # k values for the parcel sweep
    token_dims: tuple[int, ...] = (16, 32, 64)
    candidate_counts: tuple[int, ...] = (1, 2, 4, 8)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    k: int = 100  # parcels kept per hemisphere
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleSpec = field(default_factory=SampleSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ablate: AblateSpec = field(default_factory=AblateSpec)

    def config_hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def run_dir(self, command: str, out_override: Optional[str] = None) -> Path:
        base = Path(out_override) if out_override else Path(self.out_dir)
        return base / f"{command}-{self.config_hash()}"


def _build(cls, data: dict, path: str):
    """Construct a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path!r} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown config field(s) in {path!r}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        if dataclasses.is_dataclass(f.type) or f.name in ("atlas", "dataset", "model", "schedule", "train", "sample", "encoder"):
            sub_cls = {
                "atlas": AtlasSpec,
                "dataset": DatasetSpec,
                "model": ModelSpec,
                "schedule": ScheduleSpec,
                "train": TrainConfig,
                "sample": SampleSpec,
                "encoder": EncoderConfig,
                "ablate": AblateSpec,
            }.get(f.name)
            if sub_cls is not None and isinstance(value, dict):
                kwargs[key] = _build(sub_cls, value, f"{path}.{key}")
                continue
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {path!r}: {exc}") from exc


def load_config(path: str | Path, seed_override: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    config = _build(ExperimentConfig, data, "<root>")
    if seed_override is not None:
        config = dataclasses.replace(config, seed=int(seed_override))
    validate_config(config, base_dir=path.parent)
    return config


def validate_config(config: ExperimentConfig, base_dir: Optional[Path] = None) -> None:
    if config.k < 1:
        raise ConfigError("k: must be >= 1")
    if config.schedule.gamma <= 0:
        raise ConfigError("schedule.gamma: must be > 0")
    if config.schedule.timesteps < 1:
        raise ConfigError("schedule.timesteps: must be >= 1")
    if config.sample.steps < 1 or config.sample.steps > config.schedule.timesteps:
        raise ConfigError("sample.steps: must be in [1, schedule.timesteps]")
    if config.sample.candidates < 1:
        raise ConfigError("sample.candidates: must be >= 1")
    ds = config.dataset
    if ds.kind not in ("synthetic", "archive"):
        raise ConfigError(f"dataset.kind: must be 'synthetic' or 'archive', got {ds.kind!r}")
    if ds.kind == "synthetic":
        if ds.n_train < 1 or ds.n_test < 1:
            raise ConfigError("dataset.n_train and dataset.n_test must be >= 1")
        if ds.noise_std < 0:
            raise ConfigError("dataset.noise_std: must be >= 0")
    else:
        for name in ("atlas_path", "train_archive", "test_archive", "train_scenes", "test_scenes"):
            value = getattr(ds, name)
            if value is None:
                raise ConfigError(f"dataset.{name}: required when dataset.kind is 'archive'")
            resolved = Path(value)
            if not resolved.is_absolute() and base_dir is not None:
                resolved = base_dir / resolved
            if not resolved.exists():
                raise ConfigError(f"dataset.{name}: path does not exist: {value}")


def save_config_snapshot(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(dataclasses.asdict(config), sort_keys=True))


def default_config_yaml() -> str:
    """Commented defaults file for a full-scale run."""
    return """\
# Full-scale defaults. Desk-scale experiments should shrink the model and
# dataset sections (see README for a worked example).
seed: 0
out_dir: runs
k: 100                  # parcels kept per hemisphere (p = 2k = 200)
dataset:
  kind: synthetic
  n_train: 160
  n_test: 100
  resolution: 32
  noise_std: 0.25
  atlas:
    n_low: 4
    n_high: 4
    n_noise: 8
    vertex_min: 6
    vertex_max: 12
    seed: 0
model:
  token_dim: 768        # brain token embedding width f
  base_channels: 64
  depth: 2
  heads: 4
  head_dim: 64
  time_dim: 256
schedule:
  timesteps: 1000
  gamma: 5.0            # min-SNR loss-weight threshold
  beta_start: 0.0001
  beta_end: 0.02
train:
  epochs: 300
  batch_size: 16
  learning_rate: 0.0001
  seed: 0
  loss_parameterization: noise-prediction
  token_dropout: true
sample:
  steps: 50             # reverse-diffusion steps at inference
  candidates: 8         # seed-varied candidates ranked by the encoder
  guidance_scale: 0.0
  interpret_timesteps: 8
encoder:
  n_filters: 40
  kernel: 5
  stride: 2
  pool_grid: 4
  penalty: 1.0
  seed: 0
  val_fraction: 0.2
"""
