"""Run configuration: ``key = value`` sections, environment overrides, CLI overrides.

Precedence, lowest first: built-in defaults, config file, environment
variables named ``MSNMT_<SECTION>_<KEY>``, command-line flags.
"""
from __future__ import annotations

import configparser
import copy
import os
from dataclasses import fields
from typing import Any, Mapping

from .data import MAX_LEN, SyntheticSpec
from .model import ModelConfig

ENV_PREFIX = "MSNMT_"


class ConfigError(ValueError):
    pass


def _defaults() -> dict[str, dict[str, Any]]:
    model = {f.name: f.default for f in fields(ModelConfig)}
    train = {
        "k": "full",
        "seed": 0,
        "lr": 0.0004,
        "batch_size": 64,
        "patience": 15,               # text-only model
        "pretrain_patience": 10,      # multimodal, zero features
        "finetune_batch_size": 32,
        "finetune_patience": 5,
        "finetune": True,
        "max_epochs": 100,
        "clip_norm": None,
    }
    data = {
        "train_src": None,
        "train_tgt": None,
        "train_images": None,
        "dev_src": None,
        "dev_tgt": None,
        "dev_images": None,
        "features": None,
        "max_len": MAX_LEN,
    }
    synth = {f.name: f.default for f in fields(SyntheticSpec)}
    synth["test_size"] = 100
    return {"model": model, "train": train, "data": data, "synth": synth}


DEFAULTS = _defaults()

# keys whose default is None still need a type for parsing
_OPTIONAL_TYPES = {("model", "att_dim"): int, ("train", "clip_norm"): float}


def _parse(section: str, key: str, raw: Any) -> Any:
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key [{section}] {key}")
    if not isinstance(raw, str):
        return raw
    default = DEFAULTS[section][key]
    text = raw.strip()
    kind = _OPTIONAL_TYPES.get((section, key), type(default) if default is not None else str)
    if default is None and text.lower() in ("", "none"):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from None
    return text


def load_config(
    path=None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> dict[str, dict[str, Any]]:
    """Merge defaults, file, environment and ``overrides`` (``"section.key" -> value``)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.read(path, encoding="utf-8")
        for section in parser.sections():
            for key, raw in parser[section].items():
                cfg.setdefault(section, {})[key] = _parse(section, key, raw)
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        section, _, key = name[len(ENV_PREFIX):].lower().partition("_")
        cfg.setdefault(section, {})[key] = _parse(section, key, raw)
    for dotted, raw in (overrides or {}).items():
        if raw is None:
            continue
        section, _, key = dotted.partition(".")
        cfg.setdefault(section, {})[key] = _parse(section, key, raw)
    return cfg


def model_config(cfg: Mapping[str, Mapping[str, Any]], vocab_size: int | None = None) -> ModelConfig:
    values = dict(cfg["model"])
    if vocab_size is not None:
        values["vocab_size"] = vocab_size
    return ModelConfig(**values)


def synthetic_spec(cfg: Mapping[str, Mapping[str, Any]]) -> SyntheticSpec:
    values = {k: v for k, v in cfg["synth"].items() if k != "test_size"}
    return SyntheticSpec(**values)
