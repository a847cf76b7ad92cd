"""Flat key=value configuration files with typed keys.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are
rejected. Command-line ``--set key=value`` overrides win over the file.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

from .model import EXTRACTORS, ModelConfig
from .attention import VARIANTS
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _opt(parse):
    def inner(s: str):
        return None if s.strip().lower() in ("none", "") else parse(s)
    return inner


MODEL_KEYS: dict[str, Any] = {
    "extractor": str,
    "attention": str,
    "input_size": int,
    "channels": int,
    "in_channels": _opt(int),
    "relation_hidden": _opt(int),
    "embed_dim": _opt(int),
    "warmup_episodes": int,
    "transductive_bn": _bool,
    "model_seed": int,
}

TRAIN_KEYS: dict[str, Any] = {
    "lr": float,
    "lr_decay_factor": float,
    "plateau_patience": int,
    "max_episodes": int,
    "seed": int,
    "eval_every": int,
    "eval_episodes": int,
    "way": int,
    "shot": int,
    "queries": _opt(int),
    "target_accuracy": _opt(float),
}

DATA_KEYS: dict[str, Any] = {
    "dataset": str,          # omniglot | miniimagenet | synthetic
    "dataset_root": str,
    "augment": _bool,
    "synthetic_classes": int,
    "workers": int,
}

ALL_KEYS = {**MODEL_KEYS, **TRAIN_KEYS, **DATA_KEYS}

DEFAULTS: dict[str, Any] = {
    "extractor": "sfe4",
    "attention": "dca",
    "input_size": 28,
    "channels": 64,
    "in_channels": None,
    "relation_hidden": None,
    "embed_dim": None,
    "warmup_episodes": 10000,
    "transductive_bn": False,
    "model_seed": 0,
    "lr": 1e-3,
    "lr_decay_factor": 10.0,
    "plateau_patience": 5,
    "max_episodes": 2000,
    "seed": 0,
    "eval_every": 500,
    "eval_episodes": 100,
    "way": 5,
    "shot": 1,
    "queries": None,
    "target_accuracy": None,
    "dataset": "omniglot",
    "dataset_root": "",
    "augment": True,
    "synthetic_classes": 60,
    "workers": 1,
}


def parse_config_file(path) -> dict[str, str]:
    raw: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(file_values: dict[str, str] | None = None,
                   overrides: dict[str, str] | None = None) -> dict[str, Any]:
    """Merge defaults <- file <- overrides, with typing and key validation."""
    merged = dict(DEFAULTS)
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in ALL_KEYS:
                raise ConfigError(f"unknown configuration key {key!r}")
            if isinstance(value, str):
                try:
                    merged[key] = ALL_KEYS[key](value)
                except ConfigError:
                    raise
                except Exception as exc:
                    raise ConfigError(f"bad value for {key}: {value!r} ({exc})")
            else:
                merged[key] = value
    if merged["extractor"] not in EXTRACTORS:
        raise ConfigError(f"extractor must be one of {EXTRACTORS}, "
                          f"got {merged['extractor']!r}")
    if merged["attention"] not in VARIANTS:
        raise ConfigError(f"attention must be one of {VARIANTS}, "
                          f"got {merged['attention']!r}")
    if merged["dataset"] not in ("omniglot", "miniimagenet", "synthetic"):
        raise ConfigError(f"dataset must be omniglot, miniimagenet or "
                          f"synthetic, got {merged['dataset']!r}")
    if merged["lr"] <= 0:
        raise ConfigError("lr must be positive")
    return merged


def model_config(values: dict[str, Any]) -> ModelConfig:
    return ModelConfig(
        extractor=values["extractor"],
        attention=values["attention"],
        input_size=values["input_size"],
        channels=values["channels"],
        in_channels=values["in_channels"],
        relation_hidden=values["relation_hidden"],
        embed_dim=values["embed_dim"],
        warmup_episodes=values["warmup_episodes"],
        transductive_bn=values["transductive_bn"],
        seed=values["model_seed"],
    )


def train_config(values: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        lr=values["lr"],
        lr_decay_factor=values["lr_decay_factor"],
        plateau_patience=values["plateau_patience"],
        max_episodes=values["max_episodes"],
        warmup_episodes=values["warmup_episodes"],
        seed=values["seed"],
        eval_every=values["eval_every"],
        eval_episodes=values["eval_episodes"],
        way=values["way"],
        shot=values["shot"],
        queries=values["queries"],
        target_accuracy=values["target_accuracy"],
    )


def render_config(values: dict[str, Any]) -> str:
    lines = [f"{k}={'' if values[k] is None else values[k]}"
             for k in sorted(values)]
    return "\n".join(lines) + "\n"
