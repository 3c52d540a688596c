"""Experiment configuration: YAML file, flag overrides, validation.

Precedence is flags > file > defaults. Training defaults follow the
published full-scale settings (batch 16, 100 + 20 epochs, SGD momentum 0.9,
weight decay 5e-4, lambda 0.1 / 0.1 / 0.5).
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .channel import ChannelSpec, QuantizerSpec
from .errors import ConfigError
from .losses import KernelSpec, LossWeights
from .model import ModelConfig
from .trainer import TrainPlan


@dataclass
class DataSection:
    source_dir: Optional[str] = None
    target_dir: Optional[str] = None
    archive: Optional[str] = None
    # synthetic task, used when no directories or archive are given
    rotation_deg: float = 45.0
    translation: list = field(default_factory=lambda: [0.0, 0.0])
    color_shift: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    layout: str = "ray"
    n_per_class: int = 100
    num_classes: int = 5
    k_devices: int = 4
    view_size: int = 16
    canvas: int = 24
    data_seed: int = 0


@dataclass
class ModelSection:
    a_in: int = 64
    cr: float = 0.1
    profile: str = "desk"
    hidden: int = 256
    shared_encoder: bool = True
    dtype: str = "float32"


@dataclass
class ChannelSection:
    mode: str = "analog"
    snr_source: float = 5.0
    snr_target: float = 5.0
    q_b: int = 2
    r: int = 3
    z_min: float = -1.0
    z_max: float = 1.0


@dataclass
class TrainSection:
    epochs: int = 100
    finetune_epochs: int = 20
    batch_size: int = 16
    lr_sre: float = 1e-3
    lr_cce: float = 1e-2
    lr_decoder: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lam: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 0.5
    epsilon: float = 0.9
    kd_orientation: str = "teacher_target"
    target_weights: str = "hard"
    bandwidth_mode: str = "median"
    bandwidth: float = 1.0
    eval_draws: int = 5
    eval_every: int = 1


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    train: TrainSection = field(default_factory=TrainSection)
    output: str = "runs/default"
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if not 0 < self.model.cr <= 1:
            raise ConfigError(f"model.cr must lie in (0, 1], got {self.model.cr}")
        if self.channel.mode not in ("analog", "digital"):
            raise ConfigError(f"channel.mode must be analog or digital, got {self.channel.mode!r}")
        if self.channel.mode == "digital" and self.channel.q_b < 1:
            raise ConfigError("channel.q_b must be >= 1")
        if self.data.k_devices not in (1, 4):
            raise ConfigError("data.k_devices must be 1 or 4")
        if self.data.view_size > self.data.canvas:
            raise ConfigError("data.view_size exceeds data.canvas")
        dirs = (self.data.source_dir, self.data.target_dir)
        if any(dirs) and not all(dirs):
            raise ConfigError("give both data.source_dir and data.target_dir")
        for p in (*dirs, self.data.archive):
            if p and not Path(p).exists():
                raise ConfigError(f"dataset path {p} does not exist")
        try:
            self.model_config(self.data.num_classes)
            self.plan()
            self.source_channel()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- derived objects ------------------------------------------------------

    @property
    def uses_synthetic(self) -> bool:
        return not (self.data.archive or self.data.source_dir)

    def quantizer(self) -> QuantizerSpec | None:
        c = self.channel
        if c.mode != "digital":
            return None
        return QuantizerSpec(q_b=c.q_b, z_min=c.z_min, z_max=c.z_max, r=c.r)

    def source_channel(self) -> ChannelSpec:
        return ChannelSpec.uniform(self.channel.snr_source, self.data.k_devices, self.channel.mode, self.quantizer())

    def target_channel(self, snr_db: float | None = None) -> ChannelSpec:
        snr = self.channel.snr_target if snr_db is None else snr_db
        return ChannelSpec.uniform(snr, self.data.k_devices, self.channel.mode, self.quantizer())

    def model_config(self, num_classes: int) -> ModelConfig:
        m = self.model
        return ModelConfig(
            a_in=m.a_in,
            cr=m.cr,
            num_classes=num_classes,
            k_devices=self.data.k_devices,
            view_shape=(3, self.data.view_size, self.data.view_size),
            mode=self.channel.mode,
            z_min=self.channel.z_min,
            z_max=self.channel.z_max,
            hidden=m.hidden,
            profile=m.profile,
            shared_encoder=m.shared_encoder,
        )

    def plan(self) -> TrainPlan:
        t = self.train
        return TrainPlan(
            epochs=t.epochs,
            finetune_epochs=t.finetune_epochs,
            batch_size=t.batch_size,
            lr0={"sre": t.lr_sre, "cce": t.lr_cce, "decoder": t.lr_decoder},
            momentum=t.momentum,
            weight_decay=t.weight_decay,
            weights=LossWeights(
                lam=t.lam,
                lambda1=t.lambda1,
                lambda2=t.lambda2,
                epsilon=t.epsilon,
                kd_orientation=t.kd_orientation,
                target_weights=t.target_weights,
            ),
            kernel=KernelSpec(bandwidth=t.bandwidth, mode=t.bandwidth_mode),
            seed=self.seed,
            eval_draws=t.eval_draws,
            eval_every=t.eval_every,
        )

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "channel": ChannelSection,
    "train": TrainSection,
}


def _coerce(value: Any, current: Any, key: str):
    if isinstance(value, str) and not isinstance(current, str) and current is not None:
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key}: {value!r}") from exc
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(f"{key} expects a boolean, got {value!r}")
    if isinstance(current, (int, float)) and not isinstance(current, bool):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        if isinstance(current, int) and not float(value).is_integer():
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return type(current)(value)
    return value


def from_dict(raw: dict | None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    apply_overrides(cfg, _flatten(raw or {}))
    return cfg


def _flatten(raw: dict) -> dict[str, Any]:
    flat = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            for k, v in value.items():
                flat[f"{key}.{k}"] = v
        else:
            flat[key] = value
    return flat


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Set dotted keys such as ``train.epochs`` on ``cfg`` in place."""
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        if section and section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        target = getattr(cfg, section) if section else cfg
        if name not in {f.name for f in fields(target)} or name in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(value, getattr(target, name), key))
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a mapping")
        # manifests embed the resolved config under "config"
        if "runs" in raw and "config" not in raw:
            raise ConfigError(f"{path} is a manifest; use the rerun command")
    cfg = from_dict(raw)
    apply_overrides(cfg, overrides or {})
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def replace(cfg: ExperimentConfig, **section_updates: dict) -> ExperimentConfig:
    """Copy of ``cfg`` with some section fields replaced, e.g. ``train={"lam": 0}``."""
    new = dataclasses.replace(cfg)
    for section, updates in section_updates.items():
        if section in _SECTIONS:
            setattr(new, section, dataclasses.replace(getattr(cfg, section), **updates))
        else:
            setattr(new, section, updates)
    return new
