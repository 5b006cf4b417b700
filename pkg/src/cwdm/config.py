"""Run configuration: nested dataclasses loaded from YAML, overridable per key."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import BRATS_PROFILE, MODALITIES, PreprocessSpec
from .denoiser import DenoiserConfig
from .schedule import make_schedule


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str | None = None
    profile: dict = field(default_factory=lambda: dict(BRATS_PROFILE))
    ext: str = ".nii.gz"
    preprocess_on_load: bool = True
    clip_lower_pct: float = 0.1
    clip_upper_pct: float = 0.1

    def preprocess_spec(self) -> PreprocessSpec | None:
        if not self.preprocess_on_load:
            return None
        return PreprocessSpec(self.clip_lower_pct, self.clip_upper_pct)


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self):
        return make_schedule(self.kind, self.T, self.beta_start, self.beta_end)


@dataclass
class TrainConfig:
    target: str = "FLAIR"
    iterations: int = 1_200_000
    learning_rate: float = 1e-5
    batch_size: int = 1
    checkpoint_every: int = 10_000
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # all off by default
    grad_clip: float = 0.0
    ema_decay: float = 0.0
    warmup_iterations: int = 0
    toy_scale: bool = False


@dataclass
class SampleConfig:
    seed: int = 0
    clamp: bool = True
    workers: int = 1
    snapshot_every: int = 0
    use_ema: bool = True


@dataclass
class EvalConfig:
    crop_mode: str = "full"
    workers: int = 1


@dataclass
class AblateConfig:
    skip_modes: list = field(default_factory=lambda: ["additive", "concatenation"])
    schedules: list = field(default_factory=lambda: ["linear", "cosine"])
    base_channels: list = field(default_factory=lambda: [64])
    target: str = "T1"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self) -> "RunConfig":
        t = self.train
        if t.target not in MODALITIES:
            raise ConfigError(f"train.target must be one of {MODALITIES}, got {t.target!r}")
        if t.iterations < 1:
            raise ConfigError("train.iterations must be >= 1")
        if t.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if t.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every must be >= 1")
        if t.learning_rate < 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if self.evaluate.crop_mode not in ("full", "cropped_224"):
            raise ConfigError(f"evaluate.crop_mode must be 'full' or 'cropped_224', got {self.evaluate.crop_mode!r}")
        if set(self.data.profile) != set(MODALITIES):
            raise ConfigError(f"data.profile must map exactly {MODALITIES}")
        if self.model.timesteps != self.schedule.T:
            raise ConfigError(f"model.timesteps ({self.model.timesteps}) must equal schedule.T ({self.schedule.T})")
        try:
            self.schedule.build()
            self.model.validate()
            self.data.preprocess_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            out[f.name] = section.to_dict() if hasattr(section, "to_dict") else dataclasses.asdict(section)
        return out

    def dump(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


TOY_OVERRIDES = {
    "model.base_channels": 8,
    "model.channel_multipliers": [1, 2],
    "train.iterations": 3000,
    "train.learning_rate": 2e-3,
    "train.checkpoint_every": 1000,
    "train.toy_scale": True,
    "ablate.base_channels": [8],
}


def section_fields(section_cls) -> dict[str, Any]:
    hints = typing.get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(section_cls)}


def from_dict(raw: dict | None) -> RunConfig:
    """Build a config from nested dicts, rejecting unknown sections or keys."""
    raw = raw or {}
    kwargs = {}
    sections = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    hints = typing.get_type_hints(RunConfig)
    for name, values in raw.items():
        if name not in sections:
            raise ConfigError(f"unknown config section {name!r}")
        cls = hints[name]
        known = section_fields(cls)
        values = values or {}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
        try:
            kwargs[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return RunConfig(**kwargs)


def load_config(path: Path | str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw)


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Set ``section.key`` values; strings are parsed as YAML scalars/lists."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        section_name, _, key = dotted.partition(".")
        section = getattr(config, section_name, None)
        if section is None or key not in section_fields(type(section)):
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(value, str):
            value = yaml.safe_load(value)
        setattr(section, key, value)
    # re-run coercions done in __post_init__
    config.model.__post_init__()
    return config
