"""Run configuration: TOML in, validated dataclasses out.

Unknown keys are rejected with their full path so typos fail loudly, and the
effective configuration can be printed back as TOML that re-parses to the
identical values.  The architecture digest covers everything that must match
for a checkpoint's tensors to be meaningful.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import GeneratorConfig
from .selfaware import Estimator, Fusion, LabelForm, SaConfig


class ConfigError(ValueError):
    """Bad configuration file: unknown key, wrong type, or invalid value."""


@dataclass
class ModelSection:
    n_max: int = 32
    feat_channels: int = 64
    blocks: int = 3
    kernel: int = 3
    hidden: int = 64
    close_distance: float = 10.0
    hist_len: int = 6
    fut_len: int = 6


@dataclass
class SelfAwareSection:
    fusion: str = "concat"
    estimator: str = "lstm"
    label_form: str = "distance"
    hidden: int = 64


@dataclass
class TrainSection:
    stage1_epochs: int = 60
    stage2_epochs: int = 40
    joint_epochs: int = 40
    ablation_epochs: int = 12
    batch_size: int = 8
    lr: float = 3e-3
    step_size: int = 15
    gamma: float = 0.5
    joint_weight: float = 0.1
    mu_class_weight: float = 0.5
    dropout_rate: float = 0.5
    mc_samples: int = 5
    ensemble_size: int = 5
    val_fraction: float = 0.1
    train_fraction: float = 16.0 / 23.0
    window_stride: int = 1


@dataclass
class EvalSection:
    grid_step: float = 0.05
    grid_stop: float = 0.95
    timing_frames: int = 100
    timing_warmup: int = 10


@dataclass
class DataSection:
    source: str = "synthetic"  # or "csv"
    csv_paths: list[str] = field(default_factory=list)
    synthetic: GeneratorConfig = field(default_factory=GeneratorConfig)


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    selfaware: SelfAwareSection = field(default_factory=SelfAwareSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def sa_config(self) -> SaConfig:
        try:
            return SaConfig(
                fusion=Fusion(self.selfaware.fusion),
                estimator=Estimator(self.selfaware.estimator),
                label_form=LabelForm(self.selfaware.label_form),
                hidden=self.selfaware.hidden,
            )
        except ValueError as exc:
            raise ConfigError(f"config: {exc}") from None

    def digest(self) -> str:
        arch = {"model": asdict(self.model), "selfaware": asdict(self.selfaware)}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        if self.data.source not in ("synthetic", "csv"):
            raise ConfigError(f"config: data.source must be 'synthetic' or 'csv', got {self.data.source!r}")
        if self.data.source == "csv" and not self.data.csv_paths:
            raise ConfigError("config: data.source = 'csv' requires data.csv_paths")
        for name in ("n_max", "feat_channels", "blocks", "hidden", "hist_len", "fut_len"):
            if getattr(self.model, name) < 1:
                raise ConfigError(f"config: model.{name} must be positive")
        if self.train.joint_weight <= 0:
            raise ConfigError("config: train.joint_weight must be positive")
        if not 0 < self.train.train_fraction < 1:
            raise ConfigError("config: train.train_fraction must be in (0, 1)")
        if not 0 <= self.train.val_fraction < 1:
            raise ConfigError("config: train.val_fraction must be in [0, 1)")
        self.sa_config()


def _apply(obj, mapping: dict, path: str) -> None:
    known = {f.name: f for f in fields(obj)}
    for key, value in mapping.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"config: unknown key {where!r}")
        current = getattr(obj, key)
        if isinstance(value, dict):
            if not hasattr(current, "__dataclass_fields__"):
                raise ConfigError(f"config: {where!r} is not a table")
            _apply(current, value, where)
        else:
            if isinstance(current, bool) or isinstance(value, bool):
                raise ConfigError(f"config: {where!r} has unsupported boolean value")
            if isinstance(current, float) and isinstance(value, int):
                value = float(value)
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            if type(value) is not type(current):
                raise ConfigError(
                    f"config: {where!r} expects {type(current).__name__}, got {type(value).__name__}")
            setattr(obj, key, value)


def load_config(path: str | Path | None) -> RunConfig:
    config = RunConfig()
    if path is not None:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from None
        try:
            mapping = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config: {path}: {exc}") from None
        _apply(config, mapping, "")
    config.validate()
    return config


def _toml_value(value) -> str:
    if isinstance(value, bool):
        raise ConfigError("config: boolean values are not used")
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"config: cannot emit {type(value)}")


def dump_toml(config: RunConfig) -> str:
    """Effective configuration as TOML; re-parsing reproduces it exactly."""
    lines = [f"seed = {config.seed}", ""]

    def emit(table: str, obj, skip: tuple[str, ...] = ()) -> None:
        lines.append(f"[{table}]")
        for f in fields(obj):
            if f.name in skip:
                continue
            lines.append(f"{f.name} = {_toml_value(getattr(obj, f.name))}")
        lines.append("")

    emit("data", config.data, skip=("synthetic",))
    emit("data.synthetic", config.data.synthetic)
    emit("model", config.model)
    emit("selfaware", config.selfaware)
    emit("train", config.train)
    emit("eval", config.eval)
    return "\n".join(lines)
