"""Experiment configuration: nested dataclasses, YAML files, ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union, get_args, get_origin, get_type_hints

import yaml

from .data import AugmentationPolicy
from .inference import InferenceConfig
from .losses import LossConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    iterations: int = 160000
    batch_size: int = 16
    backbone_lr_mult: float = 0.1
    grad_clip: float = 0.0  # 0 disables clipping


@dataclass
class DatasetEntry:
    dataset_id: str
    crop: Tuple[int, int] = (64, 64)
    scale_range: Tuple[float, float] = (1.0, 1.0)
    flip_prob: float = 0.5
    color_jitter: float = 0.0

    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(self.dataset_id, tuple(self.crop), tuple(self.scale_range),
                                  self.flip_prob, self.color_jitter)


@dataclass
class DataConfig:
    root: str = "data"
    datasets: List[DatasetEntry] = field(default_factory=list)
    sampling: str = "uniform"  # or "proportional"
    task: str = "semantic"
    n_train: int = 500
    n_val: int = 100


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    seed: int = 0
    checkpoint: str = "runs/model.ckpt"
    loss_log: str = "runs/loss_log.jsonl"
    report_dir: str = "runs/reports"

    def policies(self) -> Dict[str, AugmentationPolicy]:
        return {d.dataset_id: d.policy() for d in self.data.datasets}

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(tp, value):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping for {tp.__name__}, got {value!r}")
        hints = get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = set(value) - names
        if unknown:
            raise ConfigError(f"unknown keys for {tp.__name__}: {sorted(unknown)}")
        try:
            return tp(**{k: _build(hints[k], v) for k, v in value.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{tp.__name__}: {exc}") from exc
    origin = get_origin(tp)
    if origin in (list, List):
        (inner,) = get_args(tp)
        return [_build(inner, v) for v in value]
    if origin in (tuple, Tuple):
        args = get_args(tp)
        inner = args[0]
        return tuple(_build(inner, v) for v in value)
    if origin is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        return None if value is None else _build(args[0], value)
    if tp is float and isinstance(value, int):
        return float(value)
    return value


def toy_profile() -> ExperimentConfig:
    """Desk-scale settings: 20 queries, 3 decoder layers, three toy datasets."""
    from .data import default_toy_datasets

    cfg = ExperimentConfig()
    cfg.model.num_queries = 20
    cfg.model.layers = 3
    cfg.optim = OptimConfig(lr=1e-3, weight_decay=1e-4, poly_power=0.9, iterations=5000,
                            batch_size=8, backbone_lr_mult=1.0, grad_clip=1.0)
    cfg.data.datasets = [
        DatasetEntry(d.policy.dataset_id, d.policy.crop, d.policy.scale_range, d.policy.flip_prob,
                     d.policy.color_jitter)
        for d in default_toy_datasets()
    ]
    return cfg


def apply_overrides(cfg: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars / lists."""
    d = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return ExperimentConfig.from_dict(d)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                profile: str = "toy") -> ExperimentConfig:
    if profile == "toy":
        cfg = toy_profile()
    elif profile == "full":
        cfg = ExperimentConfig()
    else:
        raise ConfigError(f"unknown profile {profile!r}")
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        merged = _merge(cfg.to_dict(), loaded)
        cfg = ExperimentConfig.from_dict(merged)
    return apply_overrides(cfg, overrides)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
