"""Run configuration (strict YAML schema), seed substreams and run manifests."""

from __future__ import annotations

import hashlib
import json
import platform
import zlib
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import __version__


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class OptimBlock(Strict):
    lr: float = Field(5e-3, gt=0)
    decay: float = Field(0.5, gt=0, lt=1)
    patience: int = Field(2000, ge=1)
    batch_size: int = Field(128, ge=1)
    max_iters: int = Field(30_000, ge=1)
    min_lr: float = Field(1e-5, gt=0)
    val_every: int = Field(100, ge=1)
    n_z: int = Field(1, ge=1)


class ArchBlock(Strict):
    x_dim: int = 2
    z_dim: int = 2
    enc_hidden: tuple[int, ...] = (32, 32, 32)
    dec_hidden: tuple[int, ...] = (32, 32, 32)
    n_components: int = Field(100, ge=1)
    hyper_hidden: int = 128
    gain: float = 0.02
    mean_spread: float = Field(0.0, ge=0)  # gaussian runs: initial spread of mixture means
    init_std: float = Field(1.0, gt=0)  # gaussian runs: initial component std
    # forecasting only
    other_hidden: int = 32
    channels: tuple[int, ...] = (8, 12, 16, 16)
    convs_per_block: int = 5
    time_hidden: int = 32
    head_hidden: int = 128


class GridBlock(Strict):
    x_min: float = -6.0
    y_min: float = -6.0
    x_max: float = 6.0
    y_max: float = 6.0
    nx: int = 100
    ny: int = 100


class DataBlock(Strict):
    g1_sigmas: tuple[float, float, float] = (0.8, 1.0 / 3.0, 0.195)
    g2_sigma: float = 0.5
    n_val: int = 3000
    episodes: int = 5000
    tag_probs: tuple[float, float, float, float, float] = (0.4, 0.15, 0.1, 0.25, 0.1)
    four_way_probs: tuple[float, float, float, float] = (0.4, 0.3, 0.3, 0.0)
    queries_per_scene: int = 8
    path: str | None = None


class EvalBlock(Strict):
    n_samples: int = 10_000
    kl_samples: int = 100_000
    ks: tuple[int, ...] = (1, 12)
    coverage_samples: int = 100
    smooth_cells: float = 1.5
    peak_h: float = 0.1
    grid: GridBlock = GridBlock()


FORECAST_DEFAULTS = {
    "optim": {"batch_size": 16, "max_iters": 6000, "val_every": 200, "patience": 1000},
    "arch": {"z_dim": 8, "enc_hidden": (64, 64, 64), "dec_hidden": (64, 64, 64), "n_components": 6},
}
GAUSS2_DEFAULTS = {"arch": {"n_components": 1}}


class RunConfig(Strict):
    experiment: Literal["gaussian1", "gaussian2", "forecast"]
    seed: int = 0
    optim: OptimBlock = OptimBlock()
    arch: ArchBlock = ArchBlock()
    data: DataBlock = DataBlock()
    eval: EvalBlock = EvalBlock()

    @model_validator(mode="before")
    @classmethod
    def _experiment_defaults(cls, values):
        if not isinstance(values, dict):
            return values
        extra = {"forecast": FORECAST_DEFAULTS, "gaussian2": GAUSS2_DEFAULTS}.get(values.get("experiment"))
        if not extra:
            return values
        merged = dict(values)
        for block, defaults in extra.items():
            given = merged.get(block) or {}
            if isinstance(given, BaseModel):
                continue
            merged[block] = {**defaults, **given}
        return merged

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class ConfigError(ValueError):
    pass


def load_config(path: str | Path, seed: int | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    if seed is not None:
        raw["seed"] = seed
    try:
        return RunConfig.model_validate(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose ("data", "init", "train", "eval", ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def manifest(cfg: RunConfig, command: str) -> dict:
    import scipy

    return {
        "command": command,
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "config": cfg.model_dump(mode="json"),
        "versions": {
            "cvaeh": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }


def write_manifest(out_dir: Path, cfg: RunConfig, command: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest(cfg, command), indent=2, sort_keys=True) + "\n")
    return path
