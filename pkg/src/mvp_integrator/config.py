"""TOML run configuration with ``--set section.key=value`` overrides.

Every section and key is validated against :data:`SCHEMA`; unknown keys are
rejected. Model-relevant sections feed the checkpoint config hash.
"""

from __future__ import annotations

import copy
from dataclasses import fields
from typing import Any

import tomli

from .integrator import IntegratorConfig, MaskFlags
from .model import ModelConfig
from .synth import SynthConfig
from .training import TrainConfig, config_hash


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs/default",
    "data": {
        "manifest": "",
        "truth": "",
        "synth": {f.name: f.default for f in fields(SynthConfig)},
    },
    "backbone": {"kind": "synthetic", "projection": "identity", "embed_dim": 0, "word_table": "hashed", "seed": 0},
    "model": {"kind": "mvp", "n_ctx": 4, "fusion": "cls+patch", "prompt_tuning": True},
    "integrator": {
        "layers": 1,
        "heads": 4,
        "ff_dim": 0,
        "logit_scale": 1 / 0.07,
        "zero_init": False,
        "mask": {"attr_obj": True, "attr_attr": True, "all_primitives": True},
    },
    "training": {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"},
    "evaluation": {"split": "test", "world": "both", "primitive_top1": "composition", "batch_size": 256},
    "bench": {"n_samples": 100, "warmup": 10, "baseline": True, "text_flops_per_call": 0.0, "image_flops": 0.0},
}

MODEL_SECTIONS = ("backbone", "model", "integrator")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = _coerce(base[key], value, where)
    return out


def _coerce(default, value, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where!r} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, str) and isinstance(value, str):
        return value
    raise ConfigError(f"{where!r}: expected {type(default).__name__}, got {value!r}")


def parse_override(item: str) -> dict:
    """``"a.b=3"`` -> ``{"a": {"b": 3}}`` with the value parsed as TOML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path: str | None = None, overrides: list[str] = (), **top) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as f:
                cfg = _merge(cfg, tomli.load(f))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        cfg = _merge(cfg, parse_override(item))
    for key, value in top.items():
        if value is not None:
            cfg = _merge(cfg, {key: value})
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    choices = {
        ("backbone", "kind"): ("synthetic", "external"),
        ("backbone", "projection"): ("identity", "random"),
        ("backbone", "word_table"): ("hashed", "latent"),
        ("model", "kind"): ("mvp", "composition"),
        ("evaluation", "world"): ("closed", "open", "both"),
        ("evaluation", "primitive_top1"): ("composition", "branch"),
    }
    for (sec, key), allowed in choices.items():
        if cfg[sec][key] not in allowed:
            raise ConfigError(f"{sec}.{key} must be one of {allowed}, got {cfg[sec][key]!r}")
    try:
        synth_config(cfg)
        train_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(**cfg["data"]["synth"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["training"])


def model_config(cfg: dict, dim: int) -> ModelConfig:
    ic = cfg["integrator"]
    try:
        integ = IntegratorConfig(
            dim=dim,
            layers=ic["layers"],
            heads=ic["heads"],
            ff_dim=ic["ff_dim"] or None,
            mask=MaskFlags(**ic["mask"]),
            logit_scale=ic["logit_scale"],
            zero_init=ic["zero_init"],
        )
        m = cfg["model"]
        return ModelConfig(n_ctx=m["n_ctx"], integrator=integ, fusion=m["fusion"], prompt_tuning=m["prompt_tuning"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def model_hash(cfg: dict) -> str:
    return config_hash({k: cfg[k] for k in MODEL_SECTIONS})
