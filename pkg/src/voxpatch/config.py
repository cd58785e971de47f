"""Layered run configuration: defaults < config file < command-line flags.

The config file is flat ``key = value`` text; keys are the RunConfig field
names.  The echoed form embedded in artifacts contains only semantic
fields (never paths), so artifacts hash identically across directories.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError, FileError
from .shapes import CATEGORIES


@dataclass
class RunConfig:
    # data generation
    grid: int = 32
    patch: int = 4
    shapes: int = 50  # per category
    categories: str = ",".join(CATEGORIES)
    seed: int = 0
    # patch VAE
    vae_hidden: int = 64
    vae_latent: int = 32
    vae_beta: float = 1e-4
    vae_epochs: int = 8
    vae_batch: int = 256
    vae_lr: float = 3e-4
    # language model
    lm_layers: int = 6
    lm_dim: int = 128
    lm_heads: int = 4
    lm_context: int = 0  # 0 means auto: p + 64
    lm_epochs: int = 40
    lm_batch: int = 32
    lm_lr: float = 3e-4
    # adapters
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_dropout: float = 0.05
    # output projection
    oproj_ff: int = 256
    oproj_mlp_hidden: int = 64
    # stage training
    stage1_epochs: int = 5
    stage1_batch: int = 8
    stage1_lr: float = 3e-4
    stage2_epochs: int = 12
    stage2_batch: int = 8
    stage2_lr: float = 5e-4
    weight_decay: float = 0.01
    augment: bool = True

    def category_list(self) -> tuple[str, ...]:
        cats = tuple(c.strip() for c in self.categories.split(",") if c.strip())
        if not cats:
            raise ConfigError("categories must name at least one category")
        return cats

    def echo(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {name!r} expects a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: {exc}") from exc
    return raw


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def layered_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then config file, then explicit flag overrides."""
    cfg = RunConfig()
    if config_path:
        for key, value in parse_config_file(config_path).items():
            setattr(cfg, key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config override {key!r}")
        setattr(cfg, key, value)
    return cfg
