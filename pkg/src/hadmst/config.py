"""Training configuration: nested dataclasses, JSON loading, dotted-key overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional


class ConfigError(ValueError):
    def __init__(self, message: str, keys: Optional[List[str]] = None):
        super().__init__(message)
        self.keys = keys or []


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ModelConfig:
    base_width: int = 32
    cond_channels: int = 64
    t_dim: int = 128
    hsd_patch: int = 16
    hsd_width: int = 128
    hsd_depth: int = 4
    hsd_heads: int = 4
    text_dim: int = 64
    region_dim: int = 64
    prompt: str = "mouse brain tissue"


@dataclass
class CMSAConfig:
    lambda1: float = 0.5
    lambda2: float = 1.0
    tau: float = 0.1
    margin: float = 1.0
    fraction: float = 0.3


@dataclass
class GDALConfig:
    threshold: float = 0.3
    d_g: int = 64
    layers: int = 2
    patch: int = 32
    disc_width: int = 16


@dataclass
class LossConfig:
    lambda_contrast: float = 0.1
    lambda_adv: float = 0.01


@dataclass
class AblationConfig:
    """Switches for the three modules; all on by default."""

    hsd: bool = True
    cmsa: bool = True
    gdal: bool = True


@dataclass
class OptimConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-4
    disc_lr: float = 1e-4
    weight_decay: float = 0.01
    ema_decay: float = 0.0  # > 0 samples from an exponential moving average of the weights


@dataclass
class DataConfig:
    path: str = "data"
    num_genes: int = 8
    hr_size: int = 64
    lr_size: int = 0  # 0 keeps the 256:26 ratio
    n_train: int = 256
    n_test: int = 64


@dataclass
class EvalConfig:
    seed: int = 1234
    batch: int = 16
    max_tiles: int = 0  # 0 = whole split


@dataclass
class TrainingConfig:
    seed: int = 0
    checkpoint_every: int = 10
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    cmsa: CMSAConfig = field(default_factory=CMSAConfig)
    gdal: GDALConfig = field(default_factory=GDALConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "TrainingConfig":
        bad = []
        for key in ("lambda_contrast", "lambda_adv"):
            if getattr(self.loss, key) < 0:
                bad.append(f"loss.{key}")
        for key in ("lambda1", "lambda2", "margin"):
            if getattr(self.cmsa, key) < 0:
                bad.append(f"cmsa.{key}")
        if self.cmsa.tau <= 0:
            bad.append("cmsa.tau")
        if not 0 < self.cmsa.fraction <= 0.5:
            bad.append("cmsa.fraction")
        for key in ("lr", "disc_lr"):
            if getattr(self.optim, key) <= 0:
                bad.append(f"optim.{key}")
        if self.optim.weight_decay < 0:
            bad.append("optim.weight_decay")
        if not 0 <= self.optim.ema_decay < 1:
            bad.append("optim.ema_decay")
        if self.optim.batch_size < 1:
            bad.append("optim.batch_size")
        if self.optim.epochs < 0:
            bad.append("optim.epochs")
        if self.diffusion.T < 1:
            bad.append("diffusion.T")
        if not 0 < self.diffusion.beta_start <= self.diffusion.beta_end < 1:
            bad.append("diffusion.beta_start")
        if self.data.hr_size % self.model.hsd_patch or self.data.hr_size % self.gdal.patch:
            bad.append("data.hr_size")
        if bad:
            raise ConfigError(f"invalid value for {', '.join(bad)}", bad)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    raise ConfigError(f"bad type for {key}: expected {type(default).__name__}, got {value!r}", [key])


def _build(cls, data: Dict[str, Any], prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix.rstrip('.') or '<root>'} must be an object", [prefix])
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(prefix + k for k in data if k not in known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}", unknown)
    obj = cls()
    for name, value in data.items():
        current = getattr(obj, name)
        if is_dataclass(current):
            setattr(obj, name, _build(type(current), value, f"{prefix}{name}."))
        else:
            setattr(obj, name, _coerce(value, current, prefix + name))
    return obj


def config_from_dict(data: Dict[str, Any]) -> TrainingConfig:
    return _build(TrainingConfig, data).validate()


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}", [item])
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``a.b=value`` strings onto a nested dict (values parsed as JSON when possible)."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        key, value = parse_override(item)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key} does not name a config field", [key])
        node[parts[-1]] = value
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> TrainingConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(apply_overrides(data, overrides))
