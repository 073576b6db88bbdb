"""Run configuration: nested JSON with strict keys, documented defaults, and
a content hash recorded in every (JSON) output an experiment produces.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .backbone import ModelConfig
from .errors import ConfigError
from .training import TrainConfig

DEFAULTS: dict = {
    "model": {
        # patch 4 keeps CPU spatial attention tractable at the alpha-scaled
        # resolutions; ModelConfig itself defaults to patch 2
        "depth": 4, "hidden": 128, "heads": 4, "patch": 4, "channels": 3,
        "t_max": 1000, "text_vocab": 64, "max_original_index": 4096,
        "mlp_ratio": 4, "rope_base": 10000.0,
    },
    "data": {
        "clips": 8, "frames": 64, "height": 32, "width": 48, "fps": 10, "seed": 0,
    },
    "train": {
        "phase_frames": [8, 16, 32], "phase_steps": [150, 150, 200],
        "token_budget": 32, "alpha_set": [1, 2], "memory_span_d": 4,
        "lam": 2.0, "lr": 2e-3, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
        "grad_clip": 1.0, "cond_dropout": 0.1, "seed": 0,
        "t_max": 1000, "beta_start": 1e-4, "beta_end": 0.02,
    },
    "rollout": {
        "l_window": 32, "steps": 50, "guidance_scale": 1.0, "fps": 10,
    },
    "eval": {
        "window": 40, "c": 9.5, "search_radius": 4, "block": 8,
        "feature_seed": 90210,
    },
}


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults deep-merged with the JSON file (if any); unknown keys rejected
    and every validation problem reported at once."""
    merged = copy.deepcopy(DEFAULTS)
    problems: list[str] = []
    user = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            user = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}")
    if overrides:
        for section, vals in overrides.items():
            user.setdefault(section, {}).update(vals)
    for section, values in user.items():
        if section not in merged:
            problems.append(f"unknown config section {section!r}")
            continue
        if not isinstance(values, dict):
            problems.append(f"section {section!r} must be an object")
            continue
        for key, value in values.items():
            if key not in merged[section]:
                problems.append(f"unknown key {section}.{key}")
            else:
                merged[section][key] = value
    problems.extend(_validate(merged))
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return merged


def _validate(cfg: dict) -> list[str]:
    problems = []
    try:
        model_config(cfg)
    except (ConfigError, TypeError, ValueError) as e:
        problems.append(f"model: {e}")
    try:
        train_config(cfg)
    except (ConfigError, TypeError, ValueError) as e:
        problems.append(f"train: {e}")
    d = cfg["data"]
    for key in ("clips", "frames", "height", "width", "fps"):
        if not isinstance(d[key], int) or d[key] < 1:
            problems.append(f"data.{key} must be a positive integer, got {d[key]!r}")
    r = cfg["rollout"]
    if r["l_window"] <= cfg["train"]["memory_span_d"]:
        problems.append("rollout.l_window must exceed train.memory_span_d")
    if r["steps"] < 1:
        problems.append("rollout.steps must be >= 1")
    e = cfg["eval"]
    if e["window"] < 2:
        problems.append("eval.window must be >= 2")
    if e["c"] <= 0:
        problems.append("eval.c must be positive")
    return problems


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["phase_frames"] = tuple(t["phase_frames"])
    t["phase_steps"] = tuple(t["phase_steps"])
    t["alpha_set"] = tuple(t["alpha_set"])
    return TrainConfig(**t)


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
