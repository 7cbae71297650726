"""Run configuration: strict JSON schema, desk-scale defaults, content hash.

Unknown keys anywhere in the document are rejected so that a mistyped
hyperparameter never silently falls back to a default.  The resolved
(defaults-merged) document is what gets hashed into run manifests.
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np


class ConfigError(ValueError):
    """The run configuration is malformed."""


DEFAULTS = {
    "protocol": {
        "base_classes": 20,
        "sessions": 4,   # incremental sessions after the base session
        "way": 5,
        "shot": 5,
    },
    "model": {
        "feature_dim": 16,   # backbone channels D
        "d_model": 64,       # projector width D'
        "d_state": 8,
        "height": 4,
        "width": 4,
        "k_dirs": 4,
        "backbone": "linear",     # or "passthrough"
        "inc_init": "fresh",      # or "copy"
        "dtype": "f32",           # or "f64"
        "mode": "dual",           # or "single" / "dual_unfrozen" (ablations)
    },
    "optimizer": {
        "base_epochs": 200,
        "inc_iterations": 100,
        "base_lr": 0.2,
        "inc_lr": 0.05,
        "momentum": 0.009,
        "weight_decay": 0.0005,
        "batch_base": 64,
        "batch_inc": 32,
        "prototypes_per_batch": "all",
    },
    "losses": {
        "lambda1": 100.0,
        "lambda2": 0.5,
        "lambda3": 0.5,
    },
    "data": {
        "source": "synthetic",   # or "files"
        "samples_per_base_class": 16,
        "test_samples_per_class": 10,
        "sigma_sep": 5.0,
        "sigma": 1.0,
        "path": None,
    },
    "seed": 0,
}

_ENUMS = {
    ("model", "backbone"): {"linear", "passthrough"},
    ("model", "inc_init"): {"fresh", "copy"},
    ("model", "dtype"): {"f32", "f64"},
    ("model", "mode"): {"dual", "single", "dual_unfrozen"},
    ("data", "source"): {"synthetic", "files"},
}


def _merge_strict(defaults, overrides, path=""):
    out = copy.deepcopy(defaults)
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be an object")
            out[key] = _merge_strict(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def validate(cfg: dict) -> dict:
    """Merge onto defaults and check every field; returns the resolved dict."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    full = _merge_strict(DEFAULTS, cfg)

    p = full["protocol"]
    for key in ("base_classes", "sessions", "way", "shot"):
        _require(isinstance(p[key], int) and p[key] >= 1,
                 f"protocol.{key} must be a positive integer")
    _require(p["way"] * p["shot"] > 0, "way * shot must be positive")

    m = full["model"]
    for key in ("feature_dim", "d_model", "d_state", "height", "width", "k_dirs"):
        _require(isinstance(m[key], int) and m[key] >= 1,
                 f"model.{key} must be a positive integer")
    _require(1 <= m["k_dirs"] <= 4, "model.k_dirs must be in 1..4")
    total = p["base_classes"] + p["sessions"] * p["way"]
    _require(m["d_model"] >= total - 1,
             f"model.d_model={m['d_model']} too small for {total} classes "
             f"(classifier needs >= {total - 1})")

    o = full["optimizer"]
    for key in ("base_epochs", "inc_iterations", "batch_base", "batch_inc"):
        _require(isinstance(o[key], int) and o[key] >= 1,
                 f"optimizer.{key} must be a positive integer")
    for key in ("base_lr", "inc_lr", "momentum", "weight_decay"):
        _require(isinstance(o[key], (int, float)) and o[key] >= 0,
                 f"optimizer.{key} must be nonnegative")
    ppb = o["prototypes_per_batch"]
    _require(ppb == "all" or (isinstance(ppb, int) and ppb >= 0),
             "optimizer.prototypes_per_batch must be 'all' or a nonnegative integer")

    lo = full["losses"]
    for key in ("lambda1", "lambda2", "lambda3"):
        _require(isinstance(lo[key], (int, float)) and lo[key] >= 0,
                 f"losses.{key} must be nonnegative")

    d = full["data"]
    _require(isinstance(d["sigma"], (int, float)) and d["sigma"] > 0,
             "data.sigma must be positive")
    _require(isinstance(d["sigma_sep"], (int, float)) and d["sigma_sep"] > 0,
             "data.sigma_sep must be positive")
    for key in ("samples_per_base_class", "test_samples_per_class"):
        _require(isinstance(d[key], int) and d[key] >= 1,
                 f"data.{key} must be a positive integer")
    if d["source"] == "files":
        _require(isinstance(d["path"], str) and d["path"],
                 "data.path is required when data.source is 'files'")

    for (section, key), allowed in _ENUMS.items():
        value = full[section][key]
        _require(value in allowed,
                 f"{section}.{key} must be one of {sorted(allowed)}, got {value!r}")

    _require(isinstance(full["seed"], int), "seed must be an integer")
    return full


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return validate(raw)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def np_dtype(cfg: dict):
    return np.float64 if cfg["model"]["dtype"] == "f64" else np.float32
