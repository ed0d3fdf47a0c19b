"""Experiment configuration: one JSON document, validated strictly.

Unknown keys are rejected anywhere in the tree, every field is type-checked,
and defaults fill whatever the file omits. The effective (default-filled)
config is hashed so every report can name the exact configuration that
produced it. Two packaged presets ship with the library: ``preset-localise``
(per-layer attribution comparison) and ``preset-detect`` (frozen-backbone
detection comparison).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import ConfigError

PRESETS = {
    "preset-localise": "localise.json",
    "preset-detect": "detect.json",
}

_TRAIN_FIELDS = {
    "epochs": (int, 6),
    "lr": (float, 0.03),
    "momentum": (float, 0.9),
    "batch_size": (int, 32),
    "patience": (int, 3),
    "clip_norm": (float, 5.0),
}

SCHEMA = {
    "seed": (int, 7),
    "out_dir": (str, "runs/out"),
    "jobs": (int, 1),
    "dataset": {
        "n_images": (int, 600),
        "image_edge": (int, 32),
        "class_count": (int, 3),
        "size_range": ("int_pair", [10, 16]),
        "intensity_range": ("float_pair", [0.7, 1.0]),
        "noise": (float, 0.2),
        "distractors": (int, 0),
        "channels": (int, 1),
        "split_fractions": ("float_triple", [0.7, 0.15, 0.15]),
    },
    "model": {
        "widths": ("int_list", [8, 8, 16, 16, 32, 32]),
        "kernel": (int, 3),
    },
    "train": {
        "k": (int, 6),
        "e2e": dict(_TRAIN_FIELDS),
        "cascade": dict(_TRAIN_FIELDS),
        "probe": {
            "epochs": (int, 10),
            "lr": (float, 0.1),
            "momentum": (float, 0.9),
            "batch_size": (int, 64),
            "patience": (int, 3),
            "clip_norm": (float, 5.0),
        },
    },
    "explain": {
        "methods": ("str_list", ["grad_cam"]),
        "taps": ("int_list", [2, 3, 4, 5]),
        "percentile": (float, 90.0),
        "sigma": (float, 2.0),
        "lime": {
            "n_samples": (int, 150),
            "ridge_lambda": (float, 1.0),
            "keep_prob": (float, 0.5),
            "top_k": (int, 4),
            "patch_edge": (int, 8),
        },
    },
    "detect": {
        "S": (int, 7),
        "B": (int, 2),
        "tap": (int, 4),
        "conf_threshold": (float, 0.05),
        "nms_iou": (float, 0.5),
        "head_seeds": (int, 1),
        "lambda_coord": (float, 5.0),
        "lambda_noobj": (float, 0.5),
        "train": {
            "epochs": (int, 12),
            "lr": (float, 0.08),
            "momentum": (float, 0.9),
            "batch_size": (int, 32),
            "patience": (int, 4),
            "clip_norm": (float, 5.0),
        },
    },
    "granulometry": {
        "max_size": (int, 8),
        "percentile": (float, 90.0),
    },
}

_METHODS = ("saliency", "grad_cam", "lime")


def _check_leaf(path: str, kind, value):
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if kind == "int_list":
        if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected a list of integers, got {value!r}")
        return list(value)
    if kind == "str_list":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{path}: expected a list of strings, got {value!r}")
        return list(value)
    if kind == "int_pair":
        v = _check_leaf(path, "int_list", value)
        if len(v) != 2:
            raise ConfigError(f"{path}: expected two integers, got {value!r}")
        return v
    if kind == "float_pair" or kind == "float_triple":
        want = 2 if kind == "float_pair" else 3
        if not isinstance(value, list) or len(value) != want or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected {want} numbers, got {value!r}")
        return [float(v) for v in value]
    raise AssertionError(f"unknown schema kind {kind!r}")


def _merge(schema: dict, given: dict, path: str = "") -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {given!r}")
    for key in given:
        if key not in schema:
            raise ConfigError(f"unknown config key: {path + key!r}")
    out = {}
    for key, entry in schema.items():
        here = f"{path}{key}"
        if isinstance(entry, dict):
            out[key] = _merge(entry, given.get(key, {}), here + ".")
        else:
            kind, default = entry
            out[key] = _check_leaf(here, kind, given[key]) if key in given else default
    return out


def _semantic_checks(cfg: dict) -> None:
    if len(cfg["model"]["widths"]) != 6:
        raise ConfigError("model.widths: exactly 6 channel widths required")
    for m in cfg["explain"]["methods"]:
        if m not in _METHODS:
            raise ConfigError(f"explain.methods: unknown method {m!r} (use {_METHODS})")
    k = cfg["train"]["k"]
    if not 1 <= k <= 6:
        raise ConfigError(f"train.k: must be in 1..6, got {k}")
    for tap in cfg["explain"]["taps"]:
        if not 1 <= tap <= 6:
            raise ConfigError(f"explain.taps: tap {tap} out of range 1..6")
    if not 1 <= cfg["detect"]["tap"] <= 6:
        raise ConfigError(f"detect.tap: out of range 1..6")


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    hash: str

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out_dir"])


def _config_text(source: str | Path) -> str:
    name = str(source)
    if name in PRESETS:
        return resources.files("layerlens.presets").joinpath(PRESETS[name]).read_text("utf-8")
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file not found: {source}")
    return path.read_text("utf-8")


def load_config(source: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse, default-fill and validate; ``overrides`` (flag values) win."""
    try:
        given = json.loads(_config_text(source))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    cfg = _merge(SCHEMA, given)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    _semantic_checks(cfg)
    # jobs is an execution detail: outputs must not depend on worker count
    hashed = {k: v for k, v in cfg.items() if k != "jobs"}
    canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
    return ExperimentConfig(cfg, digest)
