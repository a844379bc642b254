"""Run configuration: one YAML document of flat dotted keys with defaults.

Nested mappings are accepted and flattened (``mc: {a: 9}`` is ``mc.a``).
Unknown keys and values that cannot take the default's type are rejected.
"""

from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    # world
    "world.mode": "corpus",
    "world.style": "mixed",
    "world.n_submaps": 500,
    "world.n_lines": 4,
    "world.line_length": 150.0,
    "world.line_spacing": 12.0,
    "world.heading": 0.0,
    "world.swath_width": 40.0,
    "world.ping_spacing": 1.5,
    "world.beams_per_ping": 24,
    "world.beam_jitter": 0.0,
    "world.submap_length": 15.0,
    "world.binary": False,
    # mc
    "mc.a": 9.0,
    "mc.iterations": 1000,
    "mc.sigma_xyz": [0.0, 0.0, 0.1],
    "mc.max_failure_fraction": 0.2,
    "mc.voxel_size": 0.05,
    "mc.gicp_max_iterations": 50,
    "mc.gicp_tolerance": 1e-4,
    "mc.gicp_max_distance": 5.0,
    "mc.gicp_k": 20,
    "mc.gicp_epsilon": 1e-3,
    # model
    "model.point_mlp_sizes": [64, 64, 64, 128, 1024],
    "model.head_sizes": [1000, 1000, 1000, 1000],
    "model.dropout_p": 0.4,
    "model.use_input_transform": False,
    "model.use_feature_transform": False,
    "model.init_variance": 9.0,
    "model.bn_momentum": 0.1,
    "model.l_bound": 10.0,
    "model.d_bound": 10.0,
    # train
    "train.learning_rate": 1e-4,
    "train.weight_decay": 1e-4,
    "train.batch_size": 500,
    "train.validation_fraction": 0.2,
    "train.patience": 20,
    "train.max_episodes": 2000,
    "train.target_floor": 1e-6,
    "train.augment": False,
    "train.val_batch_size": 0,
    # slam
    "slam.trials": 20,
    "slam.coverage": 0.6,
    "slam.rc_yaw": 0.01,
    "slam.rc_xy": 0.0,
    "slam.dr_sigma_xy": 0.1,
    "slam.dr_sigma_yaw": 0.1,
    "slam.mc_iterations": 1000,
    "slam.map_cell": 1.0,
    "slam.max_iterations": 100,
}

CHOICES = {
    "world.mode": ("corpus", "survey"),
    "world.style": ("flat", "bumps", "ridges", "rough", "mixed"),
}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, value, default):
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)) or not value:
                raise TypeError
            kind = type(default[0])
            return [_coerce(key, v, kind(0)) for v in value]
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            if key in CHOICES and value not in CHOICES[key]:
                raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
            return value
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot use {value!r} where {type(default).__name__} is expected") from None
    raise ConfigError(f"{key}: unsupported type")


def resolve(overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    for k, v in _flatten(overrides or {}).items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {k!r}")
        cfg[k] = _coerce(k, v, DEFAULTS[k])
    return cfg


def load(path=None, seed: int | None = None) -> dict:
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = resolve(doc)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def section(cfg: dict, name: str) -> dict:
    p = name + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(cfg: dict, command: str) -> list:
    """Header lines (without the leading ``#``) recorded in every output."""
    return [
        f"bathykl {__version__} command={command} config_hash={config_hash(cfg)} seed={cfg['seed']}",
        f"python {platform.python_version()} numpy {np.__version__} scipy {scipy.__version__}",
    ]


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
