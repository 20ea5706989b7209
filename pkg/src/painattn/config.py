"""Resolved run configuration and the ``key = value`` config-file format.

Precedence is defaults < config file < command-line flags. The resolved
``RunConfig`` is what goes into every manifest.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .synth import ProtocolConfig
from .train import TASKS, TrainConfig

MODEL_PRESETS = ("reference", "mini")
TEMP_MODES = ("verbatim", "endpoint")


@dataclass
class RunConfig:
    task: str = "t0t4"
    data: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    seed: int = 0
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 128
    class_weighting: bool = False
    model: str = "reference"
    heads: int = 5
    blocks: int = 1
    jobs: int = 1
    subjects: int = 5
    noise: float = 0.05
    temp_mode: str = "verbatim"

    def validate(self) -> "RunConfig":
        def bad(key, why):
            raise ConfigError(f"--{key.replace('_', '-')}: {why}")

        if self.task not in TASKS:
            bad("task", f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        for key in ("epochs",):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        for key in ("batch_size", "heads", "blocks", "jobs", "subjects"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        if not self.lr > 0:
            bad("lr", "must be > 0")
        if self.weight_decay < 0:
            bad("weight_decay", "must be >= 0")
        if self.noise < 0:
            bad("noise", "must be >= 0")
        if self.model not in MODEL_PRESETS:
            bad("model", f"choose from {', '.join(MODEL_PRESETS)}")
        if self.temp_mode not in TEMP_MODES:
            bad("temp_mode", f"choose from {', '.join(TEMP_MODES)}")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.seed, class_weighting=self.class_weighting)

    def model_config(self, num_classes: int) -> ModelConfig:
        base = ModelConfig.mini() if self.model == "mini" else ModelConfig()
        return base.with_overrides(heads=self.heads, blocks=self.blocks, num_classes=num_classes)

    def protocol_config(self) -> ProtocolConfig:
        return ProtocolConfig(temp_mode=self.temp_mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str, where: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"{where}: {key} = {raw!r} is not a valid {kind}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys are allowed."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _coerce(key, raw, where)
    return values


def format_config_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items() if v is not None)


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(), str(path))


def resolve(file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    return RunConfig(**merged).validate()
