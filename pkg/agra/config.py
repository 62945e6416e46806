"""
Run configuration: YAML files, --set overrides, environment and seeding.
"""

import hashlib
import json
import os
import random
from pathlib import Path

import numpy as np
import pydantic
import torch
import yaml
from dotenv import load_dotenv

from schemas import RunConfig
from agra.errors import ConfigError

load_dotenv()

OUTPUT_ROOT = os.getenv("AGRA_OUTPUT_ROOT", "")
DEVICE = os.getenv("AGRA_DEVICE", "cpu")
CHECKPOINT = os.getenv("AGRA_CHECKPOINT", "")


def _set_dotted(data: dict, dotted_key: str, value) -> None:
    node = data
    *parents, leaf = dotted_key.split(".")
    for key in parents:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Cannot set '{dotted_key}': '{key}' is not a section")
        node = child
    node[leaf] = value


def apply_overrides(data: dict, overrides: list[str] | None) -> dict:
    """Apply `key=value` overrides; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value, got '{item}'")
        key, raw = item.split("=", 1)
        _set_dotted(data, key.strip(), yaml.safe_load(raw))
    return data


def build_config(data: dict | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Validate a raw mapping into a RunConfig; unknown keys are rejected."""
    data = apply_overrides(data or {}, overrides)
    try:
        cfg = RunConfig.model_validate(data)
    except pydantic.ValidationError as e:
        raise ConfigError(str(e)) from e

    if OUTPUT_ROOT and not Path(cfg.output_dir).is_absolute():
        cfg = cfg.model_copy(update={"output_dir": str(Path(OUTPUT_ROOT) / cfg.output_dir)})
    return cfg


def load_run_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Load a YAML config file (optional) and apply command-line overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must contain a mapping")
    cfg = build_config(data, overrides)
    print(f"[CONFIG] Resolved config {config_hash(cfg)} (seed={cfg.seed})")
    return cfg


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg.model_dump(mode="json"), f, sort_keys=True)
    return path


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def artifact_header(cfg: RunConfig) -> dict:
    """Metadata embedded in every artifact written for a run."""
    return {"config_hash": config_hash(cfg), "seed": cfg.seed}


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; returns a torch generator for data loaders."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def get_device() -> torch.device:
    return torch.device(DEVICE)
