"""Configuration schema.

Every tunable of the toolkit lives here, as nested dataclasses with their
defaults. JSON config files and ``key.sub=value`` overrides are validated
against this schema: unknown keys are rejected and values are type-checked.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for invalid configuration values, ranges or keys."""


@dataclass
class GeneratorConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 3
    max_objects: int = 6
    # object extent (circumscribed diameter) as a fraction of min(height, width)
    min_size_frac: float = 0.2
    max_size_frac: float = 0.4
    source_train: int = 2000
    target_train: int = 2000
    target_val: int = 200
    source_val: int = 200
    source_train_seed_start: int = 0
    target_train_seed_start: int = 1_000_000
    target_val_seed_start: int = 2_000_000
    source_val_seed_start: int = 3_000_000
    # target appearance ranges, sampled per image
    hue_shift_range: list[float] = field(default_factory=lambda: [-50.0, 50.0])
    illumination_strength_range: list[float] = field(default_factory=lambda: [0.0, 0.5])
    texture_frequency_range: list[float] = field(default_factory=lambda: [2.0, 6.0])
    noise_sigma_range: list[float] = field(default_factory=lambda: [0.01, 0.06])
    # fixed source appearance
    source_noise_sigma: float = 0.02
    style_seed_offset: int = 7_919


@dataclass
class TranslationConfig:
    iterations: int = 6000
    batch_size: int = 8
    lr: float = 1e-4
    lr_halve_every: int = 2000
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 1e-4
    width: int = 16
    style_dim: int = 8
    n_downsample: int = 2
    n_res: int = 2
    mlp_dim: int = 64
    disc_width: int = 16
    recon_weight: float = 10.0
    cycle_content_weight: float = 1.0
    cycle_style_weight: float = 1.0
    adv_weight: float = 1.0
    sem_weight: float = 1.0
    use_sem: bool = True
    log_every: int = 10


@dataclass
class SegmentationConfig:
    iterations: int = 1500
    batch_size: int = 8
    # from-scratch toy backbones need a far larger step than a pretrained one
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    width: int = 16
    disc_lr: float = 1e-4
    disc_width: int = 16
    adv_weight: float = 1e-3
    pseudo_weight: float = 1.0
    entropy_adv: bool = True
    log_every: int = 10


@dataclass
class PipelineConfig:
    dataset: GeneratorConfig = field(default_factory=GeneratorConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    pretrain: SegmentationConfig = field(default_factory=SegmentationConfig)
    source: SegmentationConfig = field(default_factory=SegmentationConfig)
    target: SegmentationConfig = field(default_factory=SegmentationConfig)
    K: int = 10
    sigma2_list: list[float] = field(default_factory=lambda: [1.0, 10.0])
    rounds: int = 2
    # retained proportion r for pseudo-labels consumed at rounds 1, 2, ...
    r_schedule: list[float] = field(default_factory=lambda: [0.5, 0.6])
    max_threshold: float | None = None
    fine_tune_from_previous: bool = False
    eval_batch_size: int = 50
    seed: int = 0


def _check_type(value: Any, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
        return value
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        return [_check_type(v, item, f"{key}[{i}]") for i, v in enumerate(value)]
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(value, inner[0], key)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected object, got {value!r}")
        return _from_dict(tp, value, key + ".")
    raise ConfigError(f"{key}: unsupported type {tp}")


def _from_dict(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {k: _check_type(v, hints[k], prefix + k) for k, v in data.items()}
    return cls(**kwargs)


def from_dict(cls, data: dict):
    """Build config ``cls`` from a (possibly partial) nested dict."""
    cfg = _from_dict(cls, data)
    validate(cfg)
    return cfg


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load(path, cls=PipelineConfig, overrides=()):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return apply_overrides(from_dict(cls, data), overrides)


def apply_overrides(cfg, overrides):
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return from_dict(type(cfg), data)


def _check_range(lo_hi, name):
    if len(lo_hi) != 2 or lo_hi[0] > lo_hi[1]:
        raise ConfigError(f"{name}: expected [low, high] with low <= high, got {lo_hi}")


def validate(cfg) -> None:
    if isinstance(cfg, GeneratorConfig):
        if cfg.height < 32 or cfg.width < 32:
            raise ConfigError("canvas must be at least 32x32")
        if cfg.min_objects < 1 or cfg.min_objects > cfg.max_objects:
            raise ConfigError(f"object count range [{cfg.min_objects}, {cfg.max_objects}] is empty")
        if not 0 < cfg.min_size_frac <= cfg.max_size_frac <= 1:
            raise ConfigError("size fractions must satisfy 0 < min <= max <= 1")
        for name in ("hue_shift_range", "illumination_strength_range",
                     "texture_frequency_range", "noise_sigma_range"):
            _check_range(getattr(cfg, name), name)
        lo, hi = cfg.illumination_strength_range
        if lo < 0 or hi > 1:
            raise ConfigError("illumination_strength_range must lie in [0, 1]")
        if cfg.noise_sigma_range[0] < 0 or cfg.source_noise_sigma < 0:
            raise ConfigError("noise sigmas must be non-negative")
        for split in ("source_train", "target_train", "target_val", "source_val"):
            if getattr(cfg, split) < 0:
                raise ConfigError(f"{split} count must be non-negative")
    elif isinstance(cfg, TranslationConfig):
        if cfg.iterations < 0 or cfg.batch_size < 1 or cfg.style_dim < 1:
            raise ConfigError("translation: iterations >= 0, batch_size >= 1, style_dim >= 1 required")
        if cfg.lr_halve_every < 1:
            raise ConfigError("translation.lr_halve_every must be >= 1")
    elif isinstance(cfg, SegmentationConfig):
        if cfg.iterations < 0 or cfg.batch_size < 1 or cfg.width < 1:
            raise ConfigError("segmentation: iterations >= 0, batch_size >= 1, width >= 1 required")
    elif isinstance(cfg, PipelineConfig):
        validate(cfg.dataset)
        validate(cfg.translation)
        for sub in (cfg.pretrain, cfg.source, cfg.target):
            validate(sub)
        if cfg.K < 1:
            raise ConfigError("K must be >= 1")
        if not cfg.sigma2_list or any(s <= 0 for s in cfg.sigma2_list):
            raise ConfigError("sigma2_list must be non-empty and positive")
        if cfg.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if cfg.rounds > 0 and not cfg.r_schedule:
            raise ConfigError("r_schedule must be non-empty when rounds > 0")
        if any(not 0 < r <= 1 for r in cfg.r_schedule):
            raise ConfigError("r_schedule values must lie in (0, 1]")


def copy_config(cfg):
    return copy.deepcopy(cfg)


def schema_rows(cls=PipelineConfig, prefix=""):
    """(dotted key, type name, default) for every leaf of the schema."""
    rows = []
    hints = typing.get_type_hints(cls)
    default = cls()
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        value = getattr(default, f.name)
        if dataclasses.is_dataclass(tp):
            rows.extend(schema_rows(tp, prefix + f.name + "."))
        else:
            name = getattr(tp, "__name__", None) or str(tp).replace("typing.", "")
            rows.append((prefix + f.name, str(tp) if name == "list" else name, value))
    return rows


def schema_help(cls=PipelineConfig) -> str:
    width = max(len(k) for k, _, _ in schema_rows(cls))
    return "\n".join(f"  {k:<{width}}  {json.dumps(v)}" for k, _, v in schema_rows(cls))


# Reduced-scale settings sized for a single CPU core; see README.
PRESETS = {
    "toy": {
        "dataset": {"height": 32, "width": 32, "source_train": 400, "target_train": 400,
                    "target_val": 200, "source_val": 100},
        "translation": {"iterations": 2000, "batch_size": 4, "lr": 3e-4, "lr_halve_every": 1000,
                        "n_downsample": 1, "log_every": 50},
        "pretrain": {"iterations": 600, "log_every": 50},
        "source": {"iterations": 600, "log_every": 50},
        "target": {"iterations": 600, "log_every": 50},
    },
    "smoke": {
        "dataset": {"height": 32, "width": 32, "source_train": 16, "target_train": 16,
                    "target_val": 8, "source_val": 8},
        "translation": {"iterations": 4, "batch_size": 2, "width": 4, "n_downsample": 1, "n_res": 1,
                        "mlp_dim": 8, "disc_width": 4, "log_every": 1},
        "pretrain": {"iterations": 4, "batch_size": 2, "width": 4, "disc_width": 4, "log_every": 1},
        "source": {"iterations": 4, "batch_size": 2, "width": 4, "disc_width": 4, "log_every": 1},
        "target": {"iterations": 4, "batch_size": 2, "width": 4, "disc_width": 4, "log_every": 1},
        "K": 2,
    },
}


def preset(name: str) -> PipelineConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return from_dict(PipelineConfig, copy.deepcopy(PRESETS[name]))
