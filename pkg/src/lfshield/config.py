"""Experiment configuration: defaults, TOML loading, validation."""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from lfshield.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFENSES = ("fedavg", "median", "rmedian", "tmean", "mkrum", "fgold", "ours")
DATASETS = ("digits", "synth", "idx")


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "digits"
    idx_images: str | None = None
    idx_labels: str | None = None
    max_examples: int | None = None
    test_fraction: float = 0.2
    classes: int = 10
    synth_n: int = 1000
    synth_dim: int = 16
    synth_spread: float = 1.0
    regime: str = "iid"
    alpha: float = 1.0
    # federation
    peers: int = 20
    fraction: float = 1.0
    rounds: int = 30
    # local training
    hidden: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    local_epochs: int = 3
    batch_size: int = 16
    # attack
    ratio: float = 0.0
    source: int = 7
    target: int = 1
    attackers: tuple[int, ...] | None = None
    # defense
    defense: str = "fedavg"
    mode: str = "auto"
    extreme_threshold: float = 1.0
    krum_f: int | None = None
    trim_beta: float | None = None
    seed: int = 0
    dump_features: bool = False

    @property
    def selected_count(self) -> int:
        return max(math.floor(self.fraction * self.peers + 1e-9), 1)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["attackers"] is not None:
            d["attackers"] = list(d["attackers"])
        return d


FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def flatten(mapping: dict) -> dict:
    """Merge TOML tables into one flat mapping (table names are only for readability)."""
    flat: dict = {}
    for key, value in mapping.items():
        if isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    return flat


def from_mapping(mapping: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    flat = flatten(mapping)
    unknown = sorted(set(flat) - FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "attackers" in flat and flat["attackers"] is not None:
        flat["attackers"] = tuple(int(a) for a in flat["attackers"])
    try:
        return dataclasses.replace(base or ExperimentConfig(), **flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def read_mapping(path) -> dict:
    """Flat key/value mapping of a TOML config file."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return flatten(raw)


def load_config(path) -> ExperimentConfig:
    return from_mapping(read_mapping(path))


def validate(cfg: ExperimentConfig) -> None:
    """Reject configurations that cannot run, before any training starts."""
    if cfg.dataset not in DATASETS:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}; expected one of {DATASETS}")
    if cfg.dataset == "idx":
        for p in (cfg.idx_images, cfg.idx_labels):
            if not p or not Path(p).is_file():
                raise ConfigError(f"dataset file missing: {p}")
    if cfg.defense not in DEFENSES:
        raise ConfigError(f"unknown defense {cfg.defense!r}; expected one of {DEFENSES}")
    if cfg.mode not in ("auto", "mild", "extreme"):
        raise ConfigError(f"mode must be auto, mild or extreme, got {cfg.mode!r}")
    if cfg.regime not in ("iid", "mild", "extreme"):
        raise ConfigError(f"unknown partition regime {cfg.regime!r}")
    if not 0.0 <= cfg.ratio <= 1.0 or math.isnan(cfg.ratio):
        raise ConfigError(f"attacker ratio must lie in [0, 1], got {cfg.ratio}")
    if not 0.0 < cfg.fraction <= 1.0:
        raise ConfigError(f"peer fraction must lie in (0, 1], got {cfg.fraction}")
    if cfg.rounds < 1 or cfg.peers < 1:
        raise ConfigError("rounds and peers must be at least 1")
    if cfg.source == cfg.target:
        raise ConfigError("source and target class must differ")
    for c in (cfg.source, cfg.target):
        if not 0 <= c < cfg.classes:
            raise ConfigError(f"class {c} outside [0, {cfg.classes})")
    if cfg.lr <= 0 or not 0 <= cfg.momentum < 1 or cfg.batch_size < 1 or cfg.local_epochs < 0:
        raise ConfigError("need lr > 0, momentum in [0, 1), batch_size >= 1, local_epochs >= 0")
    if cfg.hidden < 1:
        raise ConfigError("hidden width must be positive")
    if cfg.trim_beta is not None and not 0.0 <= cfg.trim_beta <= 0.5:
        raise ConfigError(f"trim_beta must lie in [0, 0.5], got {cfg.trim_beta}")
    if cfg.defense == "mkrum":
        m = cfg.selected_count
        f = cfg.krum_f if cfg.krum_f is not None else round(cfg.ratio * m)
        if m < f + 3:
            raise ConfigError(f"multi-Krum needs at least f + 3 = {f + 3} selected peers, got {m}")
    if cfg.regime == "extreme" and cfg.peers % cfg.classes:
        raise ConfigError(f"extreme regime needs peers divisible by {cfg.classes}")
