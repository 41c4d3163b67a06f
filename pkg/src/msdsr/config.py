"""Experiment configuration: strict JSON loading, overrides and content digests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .denoiser.train import TrainConfig
from .diffusion import DiffusionConfig

METHODS = ("nn", "linear", "ms-regression", "e2e", "msdsr")
DIRECTIONS = ("xz", "yz", "both")
# keys that never change results and so stay out of the digest
_UNHASHED = ("out_dir", "threads")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n: int = 32
    channels: int = 3
    kinds: tuple[str, ...] = ("grf", "cells")
    n_train: int = 40
    n_val: int = 20
    split_seed: int = 0
    grf_sigma: float = 1.5
    cell_count: int = 12
    # crops harvested from train volumes for the 2D models
    crops: int = 4096
    manifest: str = ""


@dataclass(frozen=True)
class ModelConfig:
    features: int = 32
    blocks: int = 4
    time_freqs: int = 32
    mask_channel: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if min(self.features, self.blocks, self.time_freqs) < 1:
            raise ConfigError(f"model sizes must be positive: {self}")


@dataclass(frozen=True)
class EvalConfig:
    factors: tuple[int, ...] = (2, 4, 8)
    methods: tuple[str, ...] = METHODS
    direction: str = "both"
    blur: bool = False
    embedder: str = "randconv"
    n_volumes: int = 20
    n_slices: int = 64
    checkpoints: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if any(f not in (1, 2, 4, 8) for f in self.factors):
            raise ConfigError(f"factors must be drawn from 2, 4, 8, got {self.factors}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        for key in _UNHASHED:
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{path}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_SECTIONS = {
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "diffusion"): DiffusionConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "eval"): EvalConfig,
}


def config_from_dict(d: dict[str, Any]) -> ExperimentConfig:
    return _build(ExperimentConfig, d, "")


def load_config(path: str | Path | None) -> dict[str, Any]:
    """Read a JSON config file into a plain dict (empty when ``path`` is None)."""
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def apply_override(d: dict[str, Any], assignment: str) -> None:
    """Apply ``section.key=value`` in place; ``value`` is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = d
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {part} is not a section")
    node[parts[-1]] = value
