"""Configuration dataclasses and JSON / dotted-override handling."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

ROUTING_MODES = ("topk", "dense", "default")
EMA_INITS = ("zeros", "gaussian")
EMA_WEIGHTINGS = ("uniform", "scored")
EMA_APPLY = ("forward", "backward")
DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    """Invalid configuration key or value."""


@dataclass
class MoeLayerConfig:
    n_experts: int = 8
    top_k: int = 1
    hidden: int = 64
    intermediate: int = 128
    routing: str = "topk"
    aux_alpha: float = 0.01
    beta: float = 0.9
    ema_init: str = "zeros"
    ema_weighting: str = "scored"
    ema_apply: str = "forward"
    ema_normalize: bool = True

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k must lie in [1, {self.n_experts}], got {self.top_k}")
        if self.aux_alpha < 0:
            raise ConfigError(f"aux_alpha must be >= 0, got {self.aux_alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        _check_choice("routing", self.routing, ROUTING_MODES)
        _check_choice("ema_init", self.ema_init, EMA_INITS)
        _check_choice("ema_weighting", self.ema_weighting, EMA_WEIGHTINGS)
        _check_choice("ema_apply", self.ema_apply, EMA_APPLY)


@dataclass
class ModelConfig:
    vocab_size: int = 256
    hidden: int = 64
    n_layers: int = 4
    n_heads: int = 1
    intermediate: int = 128
    max_seq_len: int = 128
    n_experts: int = 8
    top_k: int = 1
    first_layer_dense: bool = True
    head_bias: bool = True
    beta: float = 0.9
    ema_init: str = "zeros"
    ema_weighting: str = "scored"
    ema_apply: str = "forward"
    ema_normalize: bool = True
    init_std: float = 0.02
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "hidden", "n_layers", "intermediate", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_heads != 1:
            raise ConfigError("only single-head attention is supported (n_heads=1)")
        _check_choice("dtype", self.dtype, DTYPES)
        self.layer_config("topk", 0.0)

    def layer_config(self, routing: str, aux_alpha: float) -> MoeLayerConfig:
        return MoeLayerConfig(
            n_experts=self.n_experts, top_k=self.top_k, hidden=self.hidden,
            intermediate=self.intermediate, routing=routing, aux_alpha=aux_alpha,
            beta=self.beta, ema_init=self.ema_init, ema_weighting=self.ema_weighting,
            ema_apply=self.ema_apply, ema_normalize=self.ema_normalize)

    @property
    def n_moe_layers(self) -> int:
        return self.n_layers - (1 if self.first_layer_dense else 0)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    seq_len: int = 128
    lr: float = 3e-3
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0
    aux_alpha: float = 0.01
    routing: str = "topk"
    eval_interval: int = 100
    eval_batches: int = 8
    checkpoint_path: str = ""
    checkpoint_interval: int = 0
    corpus: list[str] = field(default_factory=lambda: ["data/corpus"])
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be >= 1")
        if self.aux_alpha < 0:
            raise ConfigError(f"aux_alpha must be >= 0, got {self.aux_alpha}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        _check_choice("routing", self.routing, ROUTING_MODES)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - {"model", "train"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        return cls(model=_build(ModelConfig, raw.get("model", {}), "model"),
                   train=_build(TrainConfig, raw.get("train", {}), "train"))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def with_overrides(self, overrides: list[str]) -> "ExperimentConfig":
        raw = self.to_dict()
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            section, _, name = key.strip().partition(".")
            if section not in raw or not name:
                raise ConfigError(f"unknown config key {key!r}")
            target = ModelConfig if section == "model" else TrainConfig
            if name not in raw[section]:
                raise ConfigError(f"unknown config key {key!r}")
            raw[section][name] = _coerce(target, name, value.strip(), key)
        return ExperimentConfig.from_dict(raw)


def _check_choice(name: str, value: str, allowed: tuple[str, ...]) -> None:
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")


def _build(cls, raw: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    for f in fields(cls):
        if f.name in raw:
            _check_type(cls, f.name, raw[f.name], f"{section}.{f.name}")
    return cls(**raw)


def _field_type(cls, name: str) -> str:
    for f in fields(cls):
        if f.name == name:
            return f.type if isinstance(f.type, str) else f.type.__name__
    raise ConfigError(f"unknown config key {cls.__name__}.{name}")


def _check_type(cls, name: str, value: Any, key: str) -> None:
    kind = _field_type(cls, name)
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
        "str": isinstance(value, str),
        "list[str]": isinstance(value, list) and all(isinstance(v, str) for v in value),
    }.get(kind, True)
    if not ok:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}")


def _coerce(cls, name: str, text: str, key: str) -> Any:
    kind = _field_type(cls, name)
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if kind == "list[str]":
            return [p for p in text.split(",") if p]
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from exc
    return text
