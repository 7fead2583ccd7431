"""Experiment configuration: a YAML file with nested sections, validated
strictly against the module config types. Unknown keys are rejected so typos
fail fast instead of silently running a default."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attacks import AttackConfig
from .data import SyntheticConfig
from .errors import ConfigError
from .evaluation import OtbDatasetSpec, SyntheticDatasetSpec
from .losses import DuaLossConfig
from .tracker import TrackerConfig


def build_dataclass(cls, data, where: str):
    """Construct a dataclass from nested plain data, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"unknown key {where}.{key}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _convert(hints.get(name), value, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _convert(hint, value, where: str):
    if hint is None or value is None:
        return value
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        return _convert(args[0], value, where) if len(args) == 1 else value
    if dataclasses.is_dataclass(hint):
        return build_dataclass(hint, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        args = typing.get_args(hint)
        elem = args[0] if args else None
        return tuple(_convert(elem, v, where) for v in value)
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


@dataclass(frozen=True)
class DataSection:
    kind: str = "synthetic"
    n_sequences: int = 4
    seed: int = 1000
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    root: str | None = None
    sequences: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "otb"):
            raise ValueError(f"data.kind must be 'synthetic' or 'otb', got {self.kind!r}")
        if self.kind == "otb" and self.root is None:
            raise ValueError("data.kind 'otb' requires data.root")

    def dataset_spec(self):
        if self.kind == "synthetic":
            return SyntheticDatasetSpec(
                cfg=self.synthetic, n_sequences=self.n_sequences, seed=self.seed
            )
        return OtbDatasetSpec(root=self.root, sequences=self.sequences)


_TRACKER_OVERRIDES = (
    "template_size", "search_size", "base_width", "head_width",
    "scales", "ratios", "window_weight", "size_damping",
)


@dataclass(frozen=True)
class TrackerSection:
    checkpoint: str | None = None
    preset: str = "toy"
    template_size: int | None = None
    search_size: int | None = None
    base_width: int | None = None
    head_width: int | None = None
    scales: tuple[float, ...] | None = None
    ratios: tuple[float, ...] | None = None
    window_weight: float | None = None
    size_damping: float | None = None

    def __post_init__(self) -> None:
        if self.preset not in ("toy", "paper"):
            raise ValueError(f"tracker.preset must be 'toy' or 'paper', got {self.preset!r}")

    def model_config(self) -> TrackerConfig:
        base = TrackerConfig.paper() if self.preset == "paper" else TrackerConfig.toy()
        overrides = {
            name: getattr(self, name)
            for name in _TRACKER_OVERRIDES
            if getattr(self, name) is not None
        }
        return dataclasses.replace(base, **overrides)


@dataclass(frozen=True)
class TrackerTrainSection:
    epochs: int = 5
    batches_per_epoch: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    frame_gap: int = 30
    shift_jitter: float = 0.12
    scale_jitter: float = 0.18
    loss: DuaLossConfig = field(default_factory=DuaLossConfig)


@dataclass(frozen=True)
class DefenseSection:
    depth: int | None = None
    base_width: int = 16
    template_checkpoint: str | None = None
    search_checkpoint: str | None = None


@dataclass(frozen=True)
class DefenseTrainSection:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 0.005
    betas: tuple[float, float] = (0.5, 0.999)
    epsilon: float = 8.0 / 255.0
    batches_per_epoch: int = 50
    init_dist: str = "uniform"
    frame_gap: int = 30
    shift_jitter: float = 0.12
    scale_jitter: float = 0.18
    loss: DuaLossConfig = field(default_factory=DuaLossConfig)


@dataclass(frozen=True)
class EvalSection:
    protocol: str = "ope"
    jobs: int = 1
    plots: bool = False
    dump_frames: tuple[int, ...] = ()
    dump_patches: bool = False

    def __post_init__(self) -> None:
        if self.protocol not in ("ope", "reset", "both"):
            raise ValueError(f"evaluation.protocol must be ope/reset/both, got {self.protocol!r}")
        if self.jobs < 1:
            raise ValueError("evaluation.jobs must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    tracker: TrackerSection = field(default_factory=TrackerSection)
    tracker_training: TrackerTrainSection = field(default_factory=TrackerTrainSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    defense_training: DefenseTrainSection = field(default_factory=DefenseTrainSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    evaluation: EvalSection = field(default_factory=EvalSection)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    return build_dataclass(ExperimentConfig, raw, "config")
