"""Run configuration: per-subcommand defaults, JSON config files, flag
overrides and unknown-key rejection."""

from __future__ import annotations

import json
import os
from pathlib import Path

from .errors import ConfigError

REQUIRED = object()

# key -> default; REQUIRED marks keys that must come from a flag or config file
SCHEMAS: dict[str, dict] = {
    "tile": {
        "thumb": REQUIRED, "out": REQUIRED, "thumb_mag": 1.25, "target_mag": 20.0,
        "patch": 256, "min_frac": 0.5, "median_window": 7, "closing_radius": 4,
        "min_area": 64, "min_hole_area": 64, "on_uniform": "empty",
        "sample_fraction": None, "sample_count": None, "seed": None,
    },
    "synth": {
        "out": REQUIRED, "n_bags": 100, "instances": 50, "dim": 32, "k_signal": 3,
        "mu": 6.0, "nu": 6.0, "n_ood": 0, "seed": None,
    },
    "train-mil": {
        "manifest": REQUIRED, "out": REQUIRED, "folds": 5, "seed": None, "lr": 1e-4,
        "epochs": 100, "patience": 10, "weight_decay": 1e-5, "latent": 512, "hidden": 384,
        "dropout": 0.25, "multi_branch": False, "preds": None, "labels_out": None,
    },
    "topk": {"bag": REQUIRED, "model": REQUIRED, "k": 8, "out": None},
    "train-arpl": {
        "manifest": REQUIRED, "out": REQUIRED, "ood_manifest": None, "body": None,
        "seed": None, "gamma": 1.0, "lambda_o": 0.1, "lr": 1e-3, "epochs": 30,
        "patience": 5, "joint": False, "scores_out": None,
        "mil_epochs": 100, "mil_patience": 10, "mil_lr": 1e-4, "latent": 512, "hidden": 384,
    },
    "detect": {
        "scores": None, "head": None, "manifest": None, "ood_manifest": None,
        "out": None, "summary": None, "threshold": None, "bootstrap": 1000, "seed": None,
    },
    "probe": {
        "features": REQUIRED, "labels": REQUIRED, "classes": REQUIRED, "out": REQUIRED,
        "lr": 1e-4, "epochs": 80, "batch_size": 32, "seed": None,
    },
    "zeroshot": {"embeddings": REQUIRED, "prompts": REQUIRED, "out": REQUIRED, "temperature": None},
    "textmetrics": {"cand": REQUIRED, "ref": REQUIRED, "metrics": "rouge_l,bleu1,bleu3,bleu5", "out": None},
    "calibrate": {"preds": REQUIRED, "labels": REQUIRED, "target": 0.8, "out": None},
    "eval": {
        "preds": REQUIRED, "labels": REQUIRED, "metrics": "bacc,auc,f1", "bootstrap": 1000,
        "seed": None, "threshold": None, "out": REQUIRED, "format": "json",
    },
    "report": {"input": REQUIRED, "out": REQUIRED, "format": "csv"},
}

PIPELINE_STEPS = ("synth", "train-mil", "eval", "calibrate")
PIPELINE_KEYS = {"steps", "seed", "out_dir"} | {s.replace("-", "_") for s in PIPELINE_STEPS}


def env_seed() -> int:
    raw = os.environ.get("CERS_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"CERS_SEED must be an integer, got {raw!r}") from exc


def env_threads() -> int:
    raw = os.environ.get("CERS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"CERS_THREADS must be an integer, got {raw!r}") from exc


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def check_keys(section: dict, allowed, where: str) -> None:
    for key in section:
        if key.replace("-", "_") not in allowed:
            raise ConfigError(f"unknown config key {key!r} in {where}")


def resolve(command: str, flags: dict, file_cfg: dict | None = None) -> dict:
    """Merge defaults < config file < flags (flags that are not None)."""
    schema = SCHEMAS[command]
    file_cfg = {k.replace("-", "_"): v for k, v in (file_cfg or {}).items()}
    check_keys(file_cfg, schema, command)
    out = {}
    for key, default in schema.items():
        val = flags.get(key)
        if val is None:
            val = file_cfg.get(key, default)
        if val is REQUIRED:
            raise ConfigError(f"missing required config key {key!r} for {command}")
        out[key] = val
    if "seed" in out and out["seed"] is None:
        out["seed"] = env_seed()
    return out
