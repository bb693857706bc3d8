"""Run configuration: flat ``key=value`` files with ``#`` comments, overridden by flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dpnet.blocks import BlockConfig
from dpnet.network import HEAD_WIDTH, NECK_WIDTH, NetworkGraph, build_dpnet
from dpnet.training import LossConfig, OptimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    num_classes: int = 80
    input_size: int = 320
    k: int = 5
    r: int = 8
    neck_width: int = NECK_WIDTH
    head_width: int = HEAD_WIDTH
    seed: int = 0
    alpha: float = 1.0
    beta: float = 0.5
    lr: float = 1.5e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 5
    steps: int = 200
    score_threshold: float = 0.05
    iou_threshold: float = 0.5
    weights: str = ""
    report: str = ""
    input: str = ""

    def validate(self) -> "RunConfig":
        positive = ("num_classes", "input_size", "k", "r", "neck_width", "head_width")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be a multiple of 32, got {self.input_size}")
        for name in ("alpha", "beta", "lr", "momentum", "weight_decay", "warmup_epochs", "steps", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("score_threshold", "iou_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        return self

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(k=self.k, r=self.r)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, beta=self.beta)

    def optim(self, epochs: int) -> OptimConfig:
        return OptimConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay, epochs=epochs,
                           warmup_epochs=min(self.warmup_epochs, epochs))

    def graph(self) -> NetworkGraph:
        return build_dpnet(self.num_classes, self.input_size, self.block, self.neck_width, self.head_width)


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = type(getattr(RunConfig, key))
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    try:
        if kind is int:
            return int(str(value).strip())
        if kind is float:
            return float(str(value).strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None
    return str(value).strip()


def parse_config_text(text: str) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def config_load(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None,
                base: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Precedence, lowest first: field defaults, ``base``, the file at ``path``, ``overrides``.

    ``None`` values in ``overrides`` mean "not given".
    """
    values: Dict[str, Any] = {}
    for layer in (base or {}, parse_config_text(Path(path).read_text()) if path else {}, overrides or {}):
        for key, value in layer.items():
            if value is None:
                continue
            if key not in FIELDS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _coerce(key, value)
    return RunConfig(**values).validate()
