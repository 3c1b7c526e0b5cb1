"""Run configuration: flat sectioned config files plus CLI overrides.

The on-disk format is a flat TOML subset: ``[section]`` headers and
``key = value`` lines with strings, numbers, booleans and lists. Every
field of a run is addressable, and a resolved snapshot re-fed through
``--config`` reproduces the identical run.
"""

from __future__ import annotations

import ast
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigError, ValidationError
from .model import ModelConfig


def parse_value(token: str):
    token = token.strip()
    if token == "true":
        return True
    if token == "false":
        return False
    try:
        return ast.literal_eval(token)
    except (ValueError, SyntaxError):
        return token  # bare word = string


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    return json.dumps(str(value))


def dumps_config(config: dict) -> str:
    lines = []
    scalars = {k: v for k, v in config.items() if not isinstance(v, dict)}
    sections = {k: v for k, v in config.items() if isinstance(v, dict)}
    for key, value in scalars.items():
        lines.append(f"{key} = {_format_value(value)}")
    for name, section in sections.items():
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        for key, value in section.items():
            lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def loads_config(text: str) -> dict:
    config: dict = {}
    section = config
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ValidationError(f"line {lineno}: empty section header")
            section = config.setdefault(name, {})
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        section[key.strip()] = parse_value(value)
    return config


def apply_overrides(config: dict, overrides) -> dict:
    """Apply dotted section.key=value pairs, last one wins."""
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form section.key=value")
        dotted, _, value = item.partition("=")
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ValidationError(f"override key {dotted!r} must be section.key")
        section, key = parts
        config.setdefault(section, {})[key] = parse_value(value)
    return config


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class RunConfig:
    """Everything a training/evaluation run needs, serializable to one file."""

    model: ModelConfig = field(default_factory=ModelConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    batch_size: int = 20
    epochs: int = 50
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    eval_interval: int = 1
    deterministic: bool = True
    grad_clip: float = 0.0        # max gradient norm; 0 = off (stated protocol)
    max_steps_per_epoch: int = 0  # 0 = no cap; used by smoke runs

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        return self

    def to_dict(self) -> dict:
        return {
            "train": {
                "batch_size": self.batch_size,
                "epochs": self.epochs,
                "learning_rate": self.learning_rate,
                "optimizer": self.optimizer,
                "seed": self.seed,
                "checkpoint_dir": str(self.checkpoint_dir),
                "eval_interval": self.eval_interval,
                "deterministic": self.deterministic,
                "grad_clip": self.grad_clip,
                "max_steps_per_epoch": self.max_steps_per_epoch,
            },
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"train", "model", "data"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            model = ModelConfig.from_dict(d.get("model", {}))
            data = DatasetSpec.from_dict(d.get("data", {}))
            config = cls(model=model, data=data, **d.get("train", {}))
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc
        return config

    def with_variant(self, variant: str) -> "RunConfig":
        model = ModelConfig.from_variant(
            variant,
            widths=self.model.widths, width_divisor=self.model.width_divisor,
            attn_dim=self.model.attn_dim, graph_nodes=self.model.graph_nodes,
            graph_dim=self.model.graph_dim, border_channels=self.model.border_channels,
            consistency_weight=self.model.consistency_weight, norm=self.model.norm)
        return replace(self, model=model)


def load_run_config(path=None, overrides=()) -> RunConfig:
    config: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        config = loads_config(path.read_text())
    apply_overrides(config, overrides)
    return RunConfig.from_dict(config).validate()


def save_run_config(path, config: RunConfig) -> None:
    Path(path).write_text(dumps_config(config.to_dict()))
