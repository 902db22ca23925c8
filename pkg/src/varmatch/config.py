"""Experiment configuration: one flat key-value namespace.

A config file is a JSON object whose keys are the flat dotted names below;
every key has a default, unknown keys are rejected, and command-line flags
override file values.  The resolved config is hashed (sha256 of its sorted
JSON) and the hash is recorded in run outputs so artifacts can be traced
back to their settings.
"""

from __future__ import annotations

import hashlib
import json

from .scenes import SceneConfig, build_anchor_grid
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": "runs/latest",
    "scene.canvas_w": 128.0,
    "scene.canvas_h": 128.0,
    "scene.stride": 8.0,
    "scene.anchor_w": 10.0,
    "scene.anchor_h": 25.0,
    "scene.count_min": 2,
    "scene.count_max": 8,
    "scene.box_w_min": 8.0,
    "scene.box_w_max": 14.0,
    "scene.box_h_min": 20.0,
    "scene.box_h_max": 35.0,
    "scene.train_count": 200,
    "scene.eval_count": 50,
    "scene.band": "mixed",
    "scene.frac_bare": 0.4,
    "scene.frac_partial": 0.4,
    "scene.frac_heavy": 0.2,
    "scene.patch": 5,
    "train.backend": "linear",
    "train.alpha": 0.01,
    "train.lr": 0.005,
    "train.momentum": 0.9,
    "train.weight_decay": 0.0001,
    "train.epochs": 24,
    "train.batch_size": 16,
    "train.samples": 1,
    "train.bag_size": 8,
    "train.gamma": 2.0,
    "train.lr_decay_epochs": [16, 22],
    "train.lr_decay_factor": 0.1,
    "train.log_sigma_min": -6.0,
    "train.log_sigma_max": 2.0,
    "train.negatives": "all",
    "eval.score_thresh": 0.05,
    "eval.nms_iou": 0.5,
    "eval.match_iou": 0.5,
    "gradmap.samples": 20000,
    "gradmap.jump_samples": 100000,
}


def load_config(path=None) -> dict:
    """Defaults overlaid with a config file; unknown keys are an error."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        apply_overrides(cfg, data)
    return cfg


def apply_overrides(cfg: dict, overrides: dict):
    for key, value in overrides.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        if isinstance(default, bool) or isinstance(value, bool):
            raise ConfigError(f"bad type for {key!r}")
        if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"bad type for {key!r}: expected number, got {type(value).__name__}")
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"bad type for {key!r}: expected string")
        if isinstance(default, list) and not isinstance(value, (list, tuple)):
            raise ConfigError(f"bad type for {key!r}: expected list")
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            if value != int(value):
                raise ConfigError(f"bad type for {key!r}: expected integer")
            value = int(value)
        cfg[key] = list(value) if isinstance(default, list) else value
    return cfg


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def scene_config(cfg: dict, band) -> SceneConfig:
    return SceneConfig(
        canvas=(cfg["scene.canvas_w"], cfg["scene.canvas_h"]),
        count_min=cfg["scene.count_min"],
        count_max=cfg["scene.count_max"],
        w_range=(cfg["scene.box_w_min"], cfg["scene.box_w_max"]),
        h_range=(cfg["scene.box_h_min"], cfg["scene.box_h_max"]),
        band=band,
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        alpha=cfg["train.alpha"],
        lr=cfg["train.lr"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        n_samples=cfg["train.samples"],
        bag_size=cfg["train.bag_size"],
        gamma=cfg["train.gamma"],
        seed=cfg["seed"],
        lr_decay_epochs=tuple(cfg["train.lr_decay_epochs"]),
        lr_decay_factor=cfg["train.lr_decay_factor"],
        log_sigma_min=cfg["train.log_sigma_min"],
        log_sigma_max=cfg["train.log_sigma_max"],
        negatives=cfg["train.negatives"],
        threads=cfg["threads"],
        score_thresh=cfg["eval.score_thresh"],
        nms_iou=cfg["eval.nms_iou"],
        match_iou=cfg["eval.match_iou"],
    )


def anchor_grid(cfg: dict):
    return build_anchor_grid(
        (cfg["scene.canvas_w"], cfg["scene.canvas_h"]),
        cfg["scene.stride"],
        (cfg["scene.anchor_w"], cfg["scene.anchor_h"]),
    )
