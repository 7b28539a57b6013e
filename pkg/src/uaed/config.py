"""Run configuration: nested dataclasses, YAML loading with strict keys,
flag overrides, and a stable content hash recorded in every artifact."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .metrics import MatchParams
from .simulate import ConversationStats
from .timeline import Vocabulary

CONFIG_ENV_VAR = "UAED_CONFIG"

# Default closed-set label inventory: nine household sound classes, of which
# the five long-running ones are eligible as background events.
DEFAULT_SOUND_CLASSES = (
    "alarm_bell_ringing",
    "blender",
    "cat",
    "dishes",
    "dog",
    "electric_shaver_toothbrush",
    "frying",
    "running_water",
    "vacuum_cleaner",
)
DEFAULT_BACKGROUND_CLASSES = (
    "blender",
    "electric_shaver_toothbrush",
    "frying",
    "running_water",
    "vacuum_cleaner",
)


@dataclass
class VocabConfig:
    sound_classes: list[str] = field(default_factory=lambda: list(DEFAULT_SOUND_CLASSES))
    speakers: list[str] = field(default_factory=lambda: ["spk1", "spk2", "spk3"])
    background_classes: list[str] = field(
        default_factory=lambda: list(DEFAULT_BACKGROUND_CLASSES)
    )

    def to_vocabulary(self) -> Vocabulary:
        return Vocabulary(tuple(self.sound_classes), tuple(self.speakers))


@dataclass
class SimulationConfig:
    sample_rate: int = 16000
    duration: float = 32.0
    enroll_duration: float = 4.0
    turn_mu: float = 0.8
    turn_sigma: float = 0.6
    gap_mean: float = 1.0
    overlap_prob: float = 0.2
    overlap_mean: float = 0.5

    def stats(self) -> ConversationStats:
        return ConversationStats(
            turn_mu=self.turn_mu,
            turn_sigma=self.turn_sigma,
            gap_mean=self.gap_mean,
            overlap_prob=self.overlap_prob,
            overlap_mean=self.overlap_mean,
        )


@dataclass
class FeatureConfig:
    n_mels: int = 64
    window: float = 0.025
    hop: float = 0.010
    encoder_dim: int = 128
    encoder_layers: int = 4
    branch_dim: int = 64
    fusion_stride: int = 2


@dataclass
class ModelConfig:
    d_model: int = 192
    encoder_layers: int = 6
    decoder_layers: int = 6
    heads: int = 8
    dropout: float = 0.1
    speaker_embedding: str = "oracle"  # "oracle" | "learned"

    def __post_init__(self) -> None:
        if self.speaker_embedding not in ("oracle", "learned"):
            raise ConfigError(
                f"speaker_embedding must be 'oracle' or 'learned', "
                f"got {self.speaker_embedding!r}"
            )


@dataclass
class TrainConfig:
    initial_lr: float = 1e-4
    lr_decay_per_epoch: float = 0.05
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    train_utterances: int = 2000
    val_utterances: int = 200
    online: bool = True
    threshold: float = 0.5
    median_window: int = 1

    def __post_init__(self) -> None:
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0.0 <= self.lr_decay_per_epoch < 1.0:
            raise ConfigError(
                f"lr_decay_per_epoch must be in [0, 1), got {self.lr_decay_per_epoch}"
            )


@dataclass
class MetricConfig:
    rho_dtc: float = 0.5
    rho_gtc: float = 0.5
    segment_length: float = 1.0
    collar: float = 0.0

    def params(self) -> MatchParams:
        return MatchParams(self.rho_dtc, self.rho_gtc, self.segment_length, self.collar)


@dataclass
class RunConfig:
    vocab: VocabConfig = field(default_factory=VocabConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def _section_from_dict(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted(unknown)} in section {section!r}; "
            f"known keys: {sorted(known)}"
        )
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    section_types = {
        "vocab": VocabConfig,
        "simulation": SimulationConfig,
        "features": FeatureConfig,
        "model": ModelConfig,
        "train": TrainConfig,
        "metrics": MetricConfig,
    }
    unknown = set(data) - set(section_types)
    if unknown:
        raise ConfigError(
            f"unknown config section(s) {sorted(unknown)}; "
            f"known sections: {sorted(section_types)}"
        )
    kwargs = {}
    for name, cls in section_types.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        kwargs[name] = _section_from_dict(cls, section, name)
    return RunConfig(**kwargs)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load a YAML config; falls back to $UAED_CONFIG, then to defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Apply dotted-path overrides like ``{"train.seed": 3}``."""
    data = config_to_dict(cfg)
    for key, value in overrides.items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if not name or section not in data:
            raise ConfigError(f"unknown override target {key!r}")
        if name not in data[section]:
            raise ConfigError(f"unknown override target {key!r}")
        data[section][name] = value
    return config_from_dict(data)


def config_hash(cfg: RunConfig) -> str:
    """Stable 16-hex-digit digest of the fully resolved configuration."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
