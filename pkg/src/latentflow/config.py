"""Run configuration: a nested JSON file with documented defaults; CLI flags
override file values. Every run writes the effective config next to its
outputs for replayability."""

from __future__ import annotations

import json
from pathlib import Path

from .dit import ModelConfig
from .schedules import ScheduleSpec

DEFAULTS = {
    "model": {
        "latent_channels": 8,
        "embed_dim": 64,
        "n_blocks": 4,
        "n_heads": 4,
        "memory_count": 64,
        "rope_rotate_dims": None,
        "differential_attention": False,
        "fourier_dim": 256,
        "text_ctx_len": 16,
        "text_dim": 32,
        "vocab_size": 32,
        "max_seconds": 120.0,
        "min_seconds": 1.0,
        "sample_rate": 44100,
        "downsample_ratio": 4096,
        "rope_base": 10000.0,
    },
    "schedule": {
        "mu_min": 0.5,
        "mu_max": 1.15,
        "truncation": 0.075,
        "lambda_min": -6.2,
        "lambda_max": 2.0,
        "steps": 8,
    },
    "train": {
        "batch_size": 8,
        "lr": 3e-4,
        "silence_mean_seconds": 4.0,
        "use_ot": True,
        "cfg_drop_p": 0.1,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = DEFAULTS
    if path is not None:
        with open(path) as f:
            cfg = _merge(cfg, json.load(f))
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def schedule_spec(cfg: dict) -> ScheduleSpec:
    return ScheduleSpec(**cfg["schedule"])


def write_effective_config(out_path, cfg: dict) -> None:
    snap = Path(str(out_path) + ".config.json")
    with open(snap, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
