"""Run configuration: one JSON document, validated field by field.

Precedence: built-in defaults < config file < command-line flags. Every
resolved configuration has a digest (SHA-256 of its canonical JSON form)
that is printed by each command for provenance.
"""

from __future__ import annotations

import copy
import hashlib
import json

from .exceptions import InvalidConfigError

CONFIG_VERSION = 1

DEFAULTS = {
    "format_version": CONFIG_VERSION,
    "seed": 0,
    "workers": 0,  # 0 = available parallelism
    "frontend": {"n_fft": 512, "n_mels": 64, "fmin": 125.0, "fmax": 7500.0, "log_offset": 0.01},
    "annotate": {"threshold": 0.1, "seed": None},  # seed None = derived from the root seed
    "train": {
        "variant": "vggish_fullconv",
        "width_divisor": 1,
        "n_classes": 10998,
        "lr0": 1e-4,
        "decay": 0.9,
        "batch_size": 32,
        "l2": 1.0,
        "epochs": 1,
        "val_fraction": 1 / 15,
    },
    "eval": {
        "benchmark": "esc50",
        "lr": 2e-4,
        "batch_size": 128,
        "l2": 1e-6,
        "dropout": None,
        "epochs": 100,
    },
    "paths": {},
}

_TYPES = {
    "format_version": int,
    "seed": int,
    "workers": int,
    "frontend.n_fft": int,
    "frontend.n_mels": int,
    "frontend.fmin": float,
    "frontend.fmax": float,
    "frontend.log_offset": float,
    "annotate.threshold": float,
    "annotate.seed": (int, type(None)),
    "train.variant": str,
    "train.width_divisor": int,
    "train.n_classes": int,
    "train.lr0": float,
    "train.decay": float,
    "train.batch_size": int,
    "train.l2": float,
    "train.epochs": int,
    "train.val_fraction": float,
    "eval.benchmark": str,
    "eval.lr": float,
    "eval.batch_size": int,
    "eval.l2": float,
    "eval.dropout": (float, type(None)),
    "eval.epochs": int,
}


def _merge(base, override, prefix=""):
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise InvalidConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key != "paths":
            if not isinstance(value, dict):
                raise InvalidConfigError(f"{path!r} must be a mapping")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def _check_types(cfg):
    for path, kind in _TYPES.items():
        node = cfg
        for part in path.split("."):
            node = node[part]
        kinds = kind if isinstance(kind, tuple) else (kind,)
        if float in kinds and isinstance(node, int) and not isinstance(node, bool):
            node = float(node)
        if isinstance(node, bool) or not isinstance(node, kinds):
            raise InvalidConfigError(f"{path!r} must be {' or '.join(k.__name__ for k in kinds)}, got {node!r}")
    if cfg["format_version"] != CONFIG_VERSION:
        raise InvalidConfigError(f"'format_version' must be {CONFIG_VERSION}")
    if cfg["workers"] < 0:
        raise InvalidConfigError("'workers' must be >= 0")
    if not 0 <= cfg["annotate"]["threshold"] <= 1:
        raise InvalidConfigError("'annotate.threshold' must lie in [0, 1]")
    if not isinstance(cfg["paths"], dict):
        raise InvalidConfigError("'paths' must be a mapping")


def resolve_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` (dotted keys)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfigError(f"{path}: {exc}") from None
        if not isinstance(doc, dict):
            raise InvalidConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, doc)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = cfg
        for part in parents:
            node = node[part]
        if leaf not in node:
            raise InvalidConfigError(f"unknown config key {dotted!r}")
        node[leaf] = value
    for section in ("frontend", "train", "eval"):
        for key in ("fmin", "fmax", "log_offset", "lr0", "decay", "l2", "val_fraction", "lr"):
            if key in cfg[section] and isinstance(cfg[section][key], int):
                cfg[section][key] = float(cfg[section][key])
    _check_types(cfg)
    return cfg


def config_digest(cfg):
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def subseed(root, name):
    """Independent 63-bit seed for a named component, derived from the root seed."""
    digest = hashlib.sha256(f"{int(root)}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
