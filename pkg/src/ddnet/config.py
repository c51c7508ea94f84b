"""Training configuration and its ``key = value`` text form."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .losses import LOSS_KINDS
from .model import ConfigError, ModelConfig


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: str = "mse"
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 500
    seed: int = 0
    checkpoint_interval: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    workers: int = 1

    @classmethod
    def preset(cls, name: str) -> "TrainConfig":
        """Model preset plus matching schedule; reduced scales use lr 1e-3 and 50 epochs."""
        model = ModelConfig.preset(name)
        if name == "full":
            return cls(model=model)
        return cls(model=model, learning_rate=1e-3, epochs=50)

    def validate(self) -> None:
        self.model.validate()
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("adam coefficients out of range")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, default):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    kind = type(default)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(","))
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return float(raw)
    return kind(raw)


def _assign(obj, key: str, raw: str, section: str) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names or key == "model":
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    try:
        setattr(obj, key, _parse(raw, getattr(type(obj)(), key)))
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None


def config_to_text(cfg: TrainConfig) -> str:
    lines = ["[model]"]
    lines += [f"{k} = {_format(v)}" for k, v in dataclasses.asdict(cfg.model).items()]
    lines += ["", "[train]"]
    lines += [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg) if f.name != "model"]
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Overlay the sections in ``text`` onto ``base`` (defaults when omitted)."""
    cfg = dataclasses.replace(base, model=dataclasses.replace(base.model)) if base else TrainConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    for section in parser.sections():
        if section not in ("model", "train"):
            raise ConfigError(f"unknown section [{section}]")
        target = cfg.model if section == "model" else cfg
        for key, raw in parser.items(section):
            _assign(target, key, raw, section)
    cfg.model.__post_init__()
    return cfg


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply ``{"section.key" or "key": raw string}`` overrides."""
    for dotted, raw in overrides.items():
        if "." in dotted:
            section, key = dotted.split(".", 1)
        else:
            section = "model" if dotted in {f.name for f in dataclasses.fields(ModelConfig)} else "train"
            key = dotted
        if section not in ("model", "train"):
            raise ConfigError(f"unknown section {section!r}")
        _assign(cfg.model if section == "model" else cfg, key, str(raw), section)
    cfg.model.__post_init__()
    return cfg
