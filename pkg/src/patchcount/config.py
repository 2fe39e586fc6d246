"""YAML run configuration.

A config file has up to three sections: ``arch`` (network structure),
``train`` (optimisation/sampling), and ``data`` (where training images come
from — an annotation manifest or a synthetic-set recipe). Every section is
optional; omitted keys take the dataclass defaults. Unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .errors import ConfigError, ValidationError
from .network import ArchConfig
from .train import TrainConfig

_ARCH_KEYS = {f.name for f in dataclasses.fields(ArchConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"arch"}
_TUPLE_KEYS = {"branch_out", "patch_sizes"}


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - {"arch", "train", "data"}
    if unknown:
        raise ConfigError(f"{path}: unknown top-level sections {sorted(unknown)}")
    return raw


def build_train_config(raw: dict, overrides: dict | None = None) -> TrainConfig:
    """Merge config sections and CLI overrides into a TrainConfig."""
    arch_raw = dict(raw.get("arch") or {})
    train_raw = dict(raw.get("train") or {})
    if overrides:
        for k, v in overrides.items():
            if v is None:
                continue
            if k in _ARCH_KEYS:
                arch_raw[k] = v
            else:
                train_raw[k] = v

    bad = set(arch_raw) - _ARCH_KEYS
    if bad:
        raise ConfigError(f"unknown arch keys {sorted(bad)} (known: {sorted(_ARCH_KEYS)})")
    bad = set(train_raw) - _TRAIN_KEYS
    if bad:
        raise ConfigError(f"unknown train keys {sorted(bad)} (known: {sorted(_TRAIN_KEYS)})")

    for key in _TUPLE_KEYS:
        if key in arch_raw:
            arch_raw[key] = tuple(arch_raw[key])
        if key in train_raw:
            train_raw[key] = tuple(train_raw[key])
    try:
        arch = ArchConfig(**arch_raw)
        return TrainConfig(arch=arch, **train_raw)
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def config_as_dict(cfg: TrainConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["arch"]["branch_out"] = list(out["arch"]["branch_out"])
    out["patch_sizes"] = list(out["patch_sizes"])
    return out
