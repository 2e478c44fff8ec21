"""Experiment configuration: the ``etm-toy`` preset, JSON schema and training settings."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import jsonschema

from .data import DomainSpec
from .losses import ADV_KINDS, LossWeights


class ConfigError(ValueError):
    pass


_SOURCE_PALETTE = [[0.45, 0.45, 0.45], [0.85, 0.20, 0.20], [0.20, 0.75, 0.25], [0.20, 0.30, 0.85]]

ETM_TOY = {
    "name": "etm-toy",
    "method": "ETM",
    "mode": "continual",
    "seed": 0,
    "num_classes": 4,
    "image_size": [64, 64],
    "domains": [
        {"name": "source", "role": "source", "palette": _SOURCE_PALETTE,
         "texture_noise_sigma": 0.02, "blur_radius": 0.0, "illumination_gain": 1.0,
         "clutter_density": 0.3, "samples": 400, "val_samples": 100},
        {"name": "T1", "role": "target",
         "palette": [[0.35, 0.42, 0.30], [0.90, 0.55, 0.15], [0.25, 0.65, 0.60], [0.55, 0.30, 0.80]],
         "texture_noise_sigma": 0.10, "blur_radius": 0.0, "illumination_gain": 1.0,
         "clutter_density": 0.3, "samples": 400, "val_samples": 100},
        {"name": "T2", "role": "target",
         "palette": [[0.60, 0.52, 0.62], [0.75, 0.25, 0.50], [0.50, 0.75, 0.20], [0.25, 0.60, 0.90]],
         "texture_noise_sigma": 0.03, "blur_radius": 1.0, "illumination_gain": 0.7,
         "clutter_density": 0.3, "samples": 400, "val_samples": 100},
    ],
    "model": {"channels": [32, 64, 128, 128], "head_width": 32, "disc_width": 16,
              "tm_init_scale": 0.01},
    "train": {
        "iter_max": 1500, "batch_size": 1, "source_iters": 1000, "source_batch_size": 4,
        "source_lr": 3e-2,
        "base_lr_seg": 2.5e-3, "base_lr_disc": 1e-4, "momentum": 0.97, "weight_decay": 5e-4,
        "eval_every": 0,
        "loss_weights": {"seg": [0.1, 1.0], "adv": [0.0002, 0.001], "distill": [0.02, 0.2],
                         "temperature": 2.0},
    },
    "ablation": {"use_tm": True, "tm_conv_branch": True, "tm_pool_branch": True,
                 "adv_loss": "DHA", "distill": True},
}

PRESETS = {"etm-toy": ETM_TOY}

_pair = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2}
_rgb = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
        "minItems": 3, "maxItems": 3}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "method", "mode", "seed", "num_classes", "image_size", "domains",
                 "model", "train", "ablation"],
    "properties": {
        "preset": {"type": "string", "enum": sorted(PRESETS)},
        "name": {"type": "string"},
        "method": {"type": "string", "minLength": 1},
        "mode": {"enum": ["continual", "source_only"]},
        "seed": {"type": "integer", "minimum": 0},
        "num_classes": {"type": "integer", "minimum": 2},
        "image_size": {"type": "array", "items": {"type": "integer", "minimum": 16},
                       "minItems": 2, "maxItems": 2},
        "domains": {
            "type": "array", "minItems": 2,
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["name", "role", "palette"],
                "properties": {
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "role": {"enum": ["source", "target"]},
                    "palette": {"type": "array", "items": _rgb},
                    "texture_noise_sigma": {"type": "number", "minimum": 0},
                    "blur_radius": {"type": "number", "minimum": 0},
                    "illumination_gain": {"type": "number", "exclusiveMinimum": 0},
                    "clutter_density": {"type": "number", "minimum": 0},
                    "samples": {"type": "integer", "minimum": 1},
                    "val_samples": {"type": "integer", "minimum": 1},
                },
            },
        },
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "channels": {"type": "array", "items": {"type": "integer", "minimum": 1},
                             "minItems": 4, "maxItems": 4},
                "head_width": {"type": "integer", "minimum": 1},
                "disc_width": {"type": "integer", "minimum": 1},
                "tm_init_scale": {"type": "number", "minimum": 0},
            },
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "iter_max": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "source_iters": {"type": "integer", "minimum": 0},
                "source_batch_size": {"type": "integer", "minimum": 1},
                "source_lr": {"type": "number", "exclusiveMinimum": 0},
                "base_lr_seg": {"type": "number", "exclusiveMinimum": 0},
                "base_lr_disc": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "eval_every": {"type": "integer", "minimum": 0},
                "loss_weights": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"seg": _pair, "adv": _pair, "distill": _pair,
                                   "temperature": {"type": "number", "exclusiveMinimum": 0}},
                },
            },
        },
        "ablation": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "use_tm": {"type": "boolean"},
                "tm_conv_branch": {"type": "boolean"},
                "tm_pool_branch": {"type": "boolean"},
                "adv_loss": {"enum": list(ADV_KINDS)},
                "distill": {"type": "boolean"},
            },
        },
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(raw: dict, seed: Optional[int] = None) -> dict:
    """Overlay ``raw`` on its preset (``etm-toy`` unless named) and validate it."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    preset = raw.get("preset", "etm-toy")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = _merge(PRESETS[preset], {k: v for k, v in raw.items() if k != "preset"})
    if seed is not None:
        cfg["seed"] = int(seed)
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {exc.message}") from None
    roles = [d["role"] for d in cfg["domains"]]
    if roles[0] != "source" or roles.count("source") != 1:
        raise ConfigError("the first domain must be the only source domain")
    names = [d["name"] for d in cfg["domains"]]
    if len(set(names)) != len(names):
        raise ConfigError("domain names must be unique")
    for d in cfg["domains"]:
        if len(d["palette"]) != cfg["num_classes"]:
            raise ConfigError(f"domain {d['name']!r}: palette needs {cfg['num_classes']} colours")
    ab = cfg["ablation"]
    if ab["use_tm"] and not (ab["tm_conv_branch"] or ab["tm_pool_branch"]):
        raise ConfigError("use_tm requires at least one TM branch")
    h, w = cfg["image_size"]
    if h % 16 or w % 16:
        raise ConfigError("image_size must be divisible by 16 (network and discriminator strides)")
    return cfg


def load_config(path, seed: Optional[int] = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return resolve_config(raw, seed)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def domain_specs(cfg: dict) -> List[DomainSpec]:
    specs = []
    for d in cfg["domains"]:
        fields = {k: v for k, v in d.items()}
        specs.append(DomainSpec(image_size=tuple(cfg["image_size"]),
                                num_classes=cfg["num_classes"], **fields))
    return specs


@dataclass
class TrainConfig:
    domains: List[str] = field(default_factory=lambda: ["source", "T1", "T2"])
    num_classes: int = 4
    iter_max: int = 1500
    batch_size: int = 1
    source_iters: int = 1000
    source_batch_size: int = 4
    source_lr: float = 3e-2
    base_lr_seg: float = 2.5e-3
    base_lr_disc: float = 1e-4
    momentum: float = 0.97
    weight_decay: float = 5e-4
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_every: int = 0
    channels: Tuple[int, int, int, int] = (32, 64, 128, 128)
    head_width: int = 32
    disc_width: int = 16
    tm_init_scale: float = 0.01
    use_tm: bool = True
    tm_conv_branch: bool = True
    tm_pool_branch: bool = True
    adv_loss: str = "DHA"
    distill: bool = True
    method: str = "ETM"

    def __post_init__(self):
        if len(self.domains) < 2:
            raise ConfigError("need a source and at least one target domain")
        for name in ("base_lr_seg", "base_lr_disc", "source_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.adv_loss not in ADV_KINDS:
            raise ConfigError(f"adv_loss must be one of {ADV_KINDS}")
        if self.use_tm and not (self.tm_conv_branch or self.tm_pool_branch):
            raise ConfigError("use_tm requires at least one TM branch")

    @property
    def targets(self) -> List[str]:
        return self.domains[1:]

    @classmethod
    def from_experiment(cls, cfg: dict) -> "TrainConfig":
        t, m, ab = cfg["train"], cfg["model"], cfg["ablation"]
        lw = t["loss_weights"]
        return cls(
            domains=[d["name"] for d in cfg["domains"]], num_classes=cfg["num_classes"],
            iter_max=t["iter_max"], batch_size=t["batch_size"], source_iters=t["source_iters"],
            source_batch_size=t["source_batch_size"],
            source_lr=t["source_lr"], base_lr_seg=t["base_lr_seg"], base_lr_disc=t["base_lr_disc"],
            momentum=t["momentum"], weight_decay=t["weight_decay"],
            loss_weights=LossWeights(tuple(lw["seg"]), tuple(lw["adv"]), tuple(lw["distill"]),
                                     lw["temperature"]),
            seed=cfg["seed"], eval_every=t["eval_every"], channels=tuple(m["channels"]),
            head_width=m["head_width"], disc_width=m["disc_width"],
            tm_init_scale=m["tm_init_scale"], use_tm=ab["use_tm"],
            tm_conv_branch=ab["tm_conv_branch"], tm_pool_branch=ab["tm_pool_branch"],
            adv_loss=ab["adv_loss"], distill=ab["distill"], method=cfg["method"],
        )
