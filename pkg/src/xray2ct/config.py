"""Run configuration: one TOML file mirrors :class:`TrainConfig`."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, get_type_hints

import tomli

from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .losses import LossWeights
from .perceptual import LOSS_LAYERS, VGG16_TAPS


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclass
class BackboneConfig:
    seed: int = 0
    weights_path: Optional[str] = None
    loss_layers: tuple = LOSS_LAYERS

    def validate(self):
        bad = [name for name in self.loss_layers if name not in VGG16_TAPS]
        if bad or not self.loss_layers:
            raise ValueError(f"unknown layers {bad}")
        return self


@dataclass
class TrainConfig:
    name: str = "run"
    manifest: str = ""
    out_dir: str = "runs"
    epochs: int = 100
    decay_start: int = 50
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 2
    seed: int = 0
    checkpoint_every: int = 10
    view_mode: str = "dual"
    pcept_slices: Optional[int] = None  # coronal slices per sample for the generator perceptual term
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        self.sync()

    def sync(self):
        """Propagate run-level switches into the sub-configs."""
        self.generator.view_mode = self.view_mode
        self.discriminator.view_mode = self.view_mode
        self.discriminator.dae = self.weights.dae
        return self

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.name

    def validate(self):
        self.sync()
        checks = [
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("decay_start", 0 <= self.decay_start < self.epochs, "must satisfy 0 <= decay_start < epochs"),
            ("lr", self.lr > 0, "must be > 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("checkpoint_every", self.checkpoint_every >= 1, "must be >= 1"),
            ("view_mode", self.view_mode in ("single", "dual"), "must be 'single' or 'dual'"),
            ("pcept_slices", self.pcept_slices is None or self.pcept_slices >= 1, "must be >= 1"),
            ("beta1", 0 <= self.beta1 < 1, "must lie in [0, 1)"),
            ("beta2", 0 <= self.beta2 < 1, "must lie in [0, 1)"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, f"{msg} (got {getattr(self, name)!r})")
        for section in ("weights", "generator", "discriminator", "backbone"):
            try:
                getattr(self, section).validate()
            except ValueError as err:
                raise ConfigError(section, str(err)) from err
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        new = from_dict(self.to_dict())
        for key, value in changes.items():
            section, _, leaf = key.partition(".")
            if leaf:
                setattr(getattr(new, section), leaf, value)
            else:
                setattr(new, section, value)
        return new.sync()


_SECTIONS = {
    "weights": LossWeights,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "backbone": BackboneConfig,
}


def _coerce(path: str, value, hint):
    text = str(hint)
    if value is None:
        if "Optional" in text or "None" in text:
            return None
        raise ConfigError(path, "may not be null")
    if hint is bool or text == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if "int" in text and "float" not in text and not isinstance(value, bool):
        if isinstance(value, int):
            return value
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if "float" in text:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(path, f"expected a number, got {value!r}")
    if "str" in text:
        if isinstance(value, str):
            return value
        raise ConfigError(path, f"expected a string, got {value!r}")
    if "tuple" in text:
        if isinstance(value, (list, tuple)):
            return tuple(value)
        raise ConfigError(path, f"expected a list, got {value!r}")
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected a table")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(path, "unknown field")
        if key in _SECTIONS and cls is TrainConfig:
            kwargs[key] = _build(_SECTIONS[key], value, f"{key}.")
        else:
            kwargs[key] = _coerce(path, value, hints[key])
    return cls(**kwargs)


def from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, "")


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh) if path.suffix == ".toml" else json.load(fh)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as err:
        raise ConfigError("<file>", f"cannot parse {path}: {err}") from err
    cfg = from_dict(data)
    if cfg.manifest and not Path(cfg.manifest).is_absolute():
        cfg.manifest = str((path.parent / cfg.manifest).resolve())
    return cfg.validate()


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def dump_toml(cfg: TrainConfig) -> str:
    """Minimal TOML writer for configs (None fields are omitted)."""
    data = cfg.to_dict()
    lines = [f"{k} = {_toml_value(v)}" for k, v in data.items() if k not in _SECTIONS and v is not None]
    for section in _SECTIONS:
        lines.append(f"\n[{section}]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in data[section].items() if v is not None]
    return "\n".join(lines) + "\n"
