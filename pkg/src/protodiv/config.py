"""Run configuration: nested sections, YAML files, dotted-path overrides.

One human-editable file drives every command. ``--set section.key=value``
overrides parse values with YAML semantics, so ``--set bank.k=10`` yields an
int and ``--set refiner.fusion_weights=[1,0,0,0]`` a list.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Invalid configuration; message lists every problem found."""


@dataclass
class EncoderConfig:
    stage_channels: list = field(default_factory=lambda: [16, 32, 48, 64])
    stage_strides: list = field(default_factory=lambda: [4, 8, 16, 32])


@dataclass
class BankConfig:
    k: int = 3
    d_proto: int = 64
    background: bool = True
    tau: list = field(default_factory=lambda: [0.1, 0.1, 0.1, 0.1])


@dataclass
class RefinerConfig:
    alpha: float = 0.45
    fusion_weights: list = field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    infonce_temperature: float = 0.07
    hard_negative_fraction: float = 0.5
    region_embed_dim: int = 48
    region_input_size: int = 16
    per_component_crops: bool = False


@dataclass
class DiversityConfig:
    # 1-based encoder stage whose features back the spatial distributions
    stage: int = 4
    clamp_eps: float = 1.0e-8


@dataclass
class TrainerConfig:
    learning_rate: float = 1.0e-5
    weight_decay: float = 0.003
    batch_size: int = 10
    epochs: int = 10
    lambda_sim: float = 0.1
    lambda_div: float = 0.5
    # null selects one epoch of steps
    warmup_steps: int | None = None
    grad_clip: float = 5.0


@dataclass
class CrfConfig:
    enabled: bool = False
    iterations: int = 5
    spatial_sigma: float = 3.0
    spatial_weight: float = 1.0
    color_sigma: float = 10.0
    color_weight: float = 1.0


@dataclass
class Config:
    num_classes: int = 4
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    crf: CrfConfig = field(default_factory=CrfConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        cfg = cls()
        errors = _merge(cfg, data, prefix="")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return cfg

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def apply_overrides(self, assignments):
        """Apply ``key.path=value`` strings in order; values parse as YAML."""
        errors = []
        for item in assignments:
            if "=" not in item:
                errors.append(f"override {item!r} is not of the form key=value")
                continue
            dotted, raw = item.split("=", 1)
            try:
                value = yaml.safe_load(raw)
            except yaml.YAMLError:
                errors.append(f"override {item!r}: unparseable value")
                continue
            err = _set_dotted(self, dotted.strip(), value)
            if err:
                errors.append(err)
        if errors:
            raise ConfigError("invalid overrides:\n  " + "\n  ".join(errors))
        return self

    def validate(self):
        """Check every invariant, raising one error that lists all failures."""
        errors = []

        def positive(name, value):
            if not (isinstance(value, (int, float)) and value > 0):
                errors.append(f"{name} must be positive, got {value!r}")

        def nonnegative(name, value):
            if not (isinstance(value, (int, float)) and value >= 0):
                errors.append(f"{name} must be >= 0, got {value!r}")

        positive("num_classes", self.num_classes)
        if len(self.encoder.stage_channels) != 4:
            errors.append("encoder.stage_channels must list 4 entries")
        elif any(int(c) < 1 for c in self.encoder.stage_channels):
            errors.append("encoder.stage_channels entries must be >= 1")
        if len(self.encoder.stage_strides) != 4:
            errors.append("encoder.stage_strides must list 4 entries")
        else:
            strides = list(self.encoder.stage_strides)
            if any(int(s) < 1 for s in strides):
                errors.append("encoder.stage_strides entries must be >= 1")
            if strides != sorted(strides):
                errors.append("encoder.stage_strides must be nondecreasing")
        positive("bank.k", self.bank.k)
        positive("bank.d_proto", self.bank.d_proto)
        if len(self.bank.tau) != 4 or any(t <= 0 for t in self.bank.tau):
            errors.append("bank.tau must list 4 positive values")
        if not 0.0 < self.refiner.alpha < 1.0:
            errors.append(f"refiner.alpha must lie in (0, 1), got {self.refiner.alpha!r}")
        weights = self.refiner.fusion_weights
        if len(weights) != 4 or any(w < 0 for w in weights):
            errors.append("refiner.fusion_weights must list 4 nonnegative values")
        elif sum(weights) <= 0:
            errors.append("refiner.fusion_weights must not all be zero")
        positive("refiner.infonce_temperature", self.refiner.infonce_temperature)
        if not 0.0 < self.refiner.hard_negative_fraction <= 1.0:
            errors.append("refiner.hard_negative_fraction must lie in (0, 1]")
        positive("refiner.region_embed_dim", self.refiner.region_embed_dim)
        positive("refiner.region_input_size", self.refiner.region_input_size)
        if self.diversity.stage not in (1, 2, 3, 4):
            errors.append(f"diversity.stage must be 1..4, got {self.diversity.stage!r}")
        positive("trainer.learning_rate", self.trainer.learning_rate)
        nonnegative("trainer.weight_decay", self.trainer.weight_decay)
        positive("trainer.batch_size", self.trainer.batch_size)
        positive("trainer.epochs", self.trainer.epochs)
        nonnegative("trainer.lambda_sim", self.trainer.lambda_sim)
        nonnegative("trainer.lambda_div", self.trainer.lambda_div)
        if self.trainer.warmup_steps is not None and self.trainer.warmup_steps < 0:
            errors.append("trainer.warmup_steps must be >= 0 or null")
        positive("trainer.grad_clip", self.trainer.grad_clip)
        nonnegative("crf.iterations", self.crf.iterations)
        positive("crf.spatial_sigma", self.crf.spatial_sigma)
        positive("crf.color_sigma", self.crf.color_sigma)
        nonnegative("crf.spatial_weight", self.crf.spatial_weight)
        nonnegative("crf.color_weight", self.crf.color_weight)
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return self

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)


def _merge(obj, data, prefix):
    errors = []
    if not isinstance(data, dict):
        return [f"{prefix or '<root>'} must be a mapping"]
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in fields:
            errors.append(f"unknown key {path!r}")
            continue
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            errors.extend(_merge(current, value, prefix=f"{path}."))
        else:
            setattr(obj, key, value)
    return errors


def _set_dotted(cfg, dotted, value):
    parts = dotted.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            return f"unknown key {dotted!r}"
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        return f"unknown key {dotted!r}"
    if dataclasses.is_dataclass(getattr(obj, leaf)):
        return f"key {dotted!r} is a section, not a value"
    setattr(obj, leaf, value)
    return None


def load_config(path=None, overrides=(), seed=None):
    """Build a validated config from an optional file plus overrides."""
    cfg = Config.from_file(path) if path else Config()
    if overrides:
        cfg.apply_overrides(list(overrides))
    if seed is not None:
        cfg.seed = int(seed)
    return cfg.validate()


def default_config_yaml():
    """Reference YAML documenting every key at its default value."""
    return Config().to_yaml()
