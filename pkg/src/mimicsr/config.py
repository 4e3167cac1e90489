"""Configuration tree: defaults, YAML loading, dotted-key overrides."""
from __future__ import annotations

import copy
from pathlib import Path

import yaml


class ConfigError(Exception):
    pass


DEFAULTS: dict = {
    "data": {
        "scale": 4,
        "manifest": None,
        "val_manifest": None,
    },
    "flow": {
        "backend": "classical",   # learned backend needs flow.weights
        "weights": None,
    },
    "mimick": {
        "feature_width": 64,
        "dilations": [1, 2, 4],
        "noise_sigma": [0.0, 0.04],
        "noise_gaussian_enabled": True,
        "noise_jpeg_enabled": True,
        "jpeg_quality": [30, 95],
        "jpeg_mode": "soft",
        "seed": 0,
    },
    "loss": {
        "lambda": 0.1,
        "epsilon": 1e-3,
        "color_scorer": "analytic",
        "color_weights_path": None,
    },
    "model": {
        "name": "ref_small",
        "scale": 4,
    },
    "train": {
        "iterations": 200000,
        "batch_size": 32,
        "lr": 1e-3,
        "mimick_lr": None,        # None -> same as lr
        "eta_min": 1e-6,
        "optimizer": "adam",
        "betas": [0.9, 0.999],
        "schedule": "cosine",
        "patch_hr": 128,          # HR-side patch size
        "seed": 0,
        "checkpoint_every": 1000,
        "val_every": 1000,
        "mode": "mimick",         # mimick | l1_baseline
        "max_skip_fraction": 0.01,
    },
    "metrics": {
        "niqe_params": None,      # None -> packaged natural-scene model
        "border": 4,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def load_config(path: str | Path | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        with open(p) as f:
            user = yaml.safe_load(f) or {}
        _merge(cfg, user, prefix="")
    return cfg


def _merge(base: dict, user: dict, prefix: str) -> None:
    for key, val in user.items():
        full = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {full}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {full} must be a mapping")
            _merge(base[key], val, prefix=full + ".")
        else:
            base[key] = _coerce(full, base[key], val)


def _coerce(key: str, old, new):
    if old is None or new is None:
        return new
    if isinstance(old, bool):
        if not isinstance(new, bool):
            raise ConfigError(f"config key {key} expects a bool, got {new!r}")
        return new
    if isinstance(old, int) and not isinstance(old, bool):
        if isinstance(new, bool) or not isinstance(new, (int, float)) or int(new) != new:
            raise ConfigError(f"config key {key} expects an int, got {new!r}")
        return int(new)
    if isinstance(old, float):
        if isinstance(new, bool) or not isinstance(new, (int, float)):
            raise ConfigError(f"config key {key} expects a number, got {new!r}")
        return float(new)
    if isinstance(old, str):
        if not isinstance(new, str):
            raise ConfigError(f"config key {key} expects a string, got {new!r}")
        return new
    if isinstance(old, list):
        if not isinstance(new, (list, tuple)):
            raise ConfigError(f"config key {key} expects a list, got {new!r}")
        return list(new)
    return new


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply `a.b.c=value` strings; values parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        node = cfg
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config key: {key}")
        val = yaml.safe_load(raw)
        node[leaf] = _coerce(key, node[leaf], val)
    return cfg


def save_config(cfg: dict, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=False)
