"""Training configuration and the key = value config-file parser."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

MODES = ("full", "text_only", "image_only")
BALANCE_MODES = ("st_moe", "paper_literal")
PRECISIONS = ("double", "single")


class ConfigError(ValueError):
    """Malformed configuration file or invalid field value."""


@dataclass
class TrainConfig:
    # model
    mode: str = "full"
    d: int = 32
    d_c: int = 16
    n_experts: int = 2
    n_heads: int = 4
    ff_ratio: int = 4
    gate_hidden: int = 64
    # loss weights and thresholds
    alpha: float = 0.5
    beta: float = 0.3
    eta: float = 0.01
    gamma: float = 0.1
    theta_agr: float = 0.1
    theta_sem: float = 0.2
    balance_mode: str = "st_moe"
    detach_unimodal: bool = False
    # optimization
    precision: str = "double"
    lr_main: float = 1e-5
    lr_gate: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 24
    epochs: int = 50
    seed: int = 2024
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.balance_mode not in BALANCE_MODES:
            raise ConfigError(f"balance_mode must be one of {BALANCE_MODES}, "
                              f"got {self.balance_mode!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, "
                              f"got {self.precision!r}")
        # 0 is allowed as an explicit "frozen" rate (e.g. the no-update
        # determinism check); negative rates are rejected
        if self.lr_main < 0 or self.lr_gate < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.d < self.n_heads or self.d % self.n_heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of "
                              f"n_heads={self.n_heads}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig(**d)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {kind}") from exc


def parse_config_text(text: str) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def save_config(cfg: TrainConfig, path):
    lines = [f"{name} = {value}" for name, value in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def apply_overrides(cfg: TrainConfig, pairs: list[str]) -> TrainConfig:
    """Apply 'key=value' override strings on top of a parsed config."""
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = (part.strip() for part in pair.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, raw)
    return cfg.replace(**updates)
