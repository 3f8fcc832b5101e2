"""
Run configuration: schema, named presets and environment overrides.

A run config is a preset, optionally overlaid by a JSON file (deep merge,
file wins), then `--seed`, then HEATOP_* environment variables (read
through python-dotenv, so a local .env file works too).
"""

from __future__ import annotations

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .dataset import SplitConfig
from .deeponet import NetworkConfig, TrainConfig
from .domain import BoundaryConfig, DomainSpec
from .errors import ConfigError
from .fd_source import ConductivityModel, ConstantConductivity
from .gpr import KernelConfig, NoiseConfig
from .oracle import SolveConfig

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "square-homogeneous"


class GPRGroup(BaseModel):
    """`count` fields drawn with one kernel; the group index labels them in the dataset"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kernel: KernelConfig
    count: int = Field(ge=1)


class GPRSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    groups: List[GPRGroup] = Field(min_length=1)
    # large-scale field carrying nonzero boundary data, added to every group field
    lift: Optional[KernelConfig] = None
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    sampler: Literal["pathwise", "dense"] = "pathwise"


class BenchmarkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    a: float = 2000.0
    b: float = 3000.0
    c_test: float = 3000.0
    # published scores, reported next to measured ones
    reference_r2: Dict[str, float] = Field(default_factory=dict)
    reference_test_r2: Optional[float] = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    domain: DomainSpec
    resolution: int = Field(ge=5)
    boundary: BoundaryConfig = Field(default_factory=lambda: BoundaryConfig(preset="homogeneous"))
    conductivity: ConductivityModel = Field(default_factory=ConstantConductivity)
    gpr: GPRSettings
    normalize: bool = False
    split: SplitConfig = Field(default_factory=SplitConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    solve: SolveConfig = Field(default_factory=SolveConfig)
    benchmark: BenchmarkConfig = Field(default_factory=BenchmarkConfig)
    seed: int = 0
    workers: int = Field(1, ge=1)
    output_dir: str = "artifacts"

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name


_EXPONENTIAL = {"kind": "exponential", "start": 1e-4, "decay_rate": 0.96, "decay_steps": 1000}

PRESETS: Dict[str, Dict[str, Any]] = {
    "square-homogeneous": {
        "name": "square-homogeneous",
        "domain": {"shape": "rectangle", "x_range": [0.0, 1.0], "y_range": [0.0, 1.0]},
        "resolution": 41,
        "boundary": {"preset": "homogeneous"},
        "conductivity": {"kind": "constant", "k0": 1.0},
        "gpr": {"groups": [{"kernel": {"l": 0.3, "sigma": 50.0}, "count": 200}]},
        "network": {"branch_hidden": [], "trunk_hidden": [150, 150, 150, 150], "latent_dim": 200},
        "train": {"epochs": 200, "batch_size": 160, "lr_schedule": _EXPONENTIAL},
        "benchmark": {"a": 2000.0, "b": 3000.0, "c_test": 3000.0,
                      "reference_r2": {"q1": 0.99934, "q2": 0.9989, "q3": 0.997918},
                      "reference_test_r2": 0.99986},
    },
    "square-heterogeneous": {
        "name": "square-heterogeneous",
        "domain": {"shape": "rectangle", "x_range": [0.0, 1.0], "y_range": [0.0, 1.0]},
        "resolution": 41,
        "boundary": {"preset": "square_heterogeneous"},
        "conductivity": {"kind": "constant", "k0": 1.0},
        "gpr": {"groups": [{"kernel": {"l": 0.3, "sigma": 40.0}, "count": 200}],
                "lift": {"l": 4.0, "sigma": 20.0}},
        "network": {"branch_hidden": [], "trunk_hidden": [150, 150, 150, 150], "latent_dim": 200},
        "train": {"epochs": 200, "batch_size": 160, "lr_schedule": _EXPONENTIAL},
        "benchmark": {"a": 2000.0, "b": 3000.0, "c_test": 3000.0,
                      "reference_r2": {"q1": 0.9947, "q2": 0.9843, "q3": 0.9516},
                      "reference_test_r2": 0.99986},
    },
    "variable-k": {
        "name": "variable-k",
        "domain": {"shape": "rectangle", "x_range": [0.0, 1.0], "y_range": [0.0, 1.0]},
        "resolution": 32,
        "boundary": {"preset": "homogeneous"},
        "conductivity": {"kind": "affine_in_T", "alpha": 1.0, "beta": 0.01},
        "gpr": {"groups": [{"kernel": {"l": 0.3, "sigma": 50.0}, "count": 800},
                           {"kernel": {"l": 0.3, "sigma": 80.0}, "count": 200}]},
        "network": {"branch_hidden": [300, 300], "trunk_hidden": [300, 300, 300, 300], "latent_dim": 350},
        "train": {"epochs": 200, "batch_size": 160,
                  "lr_schedule": {"kind": "piecewise", "boundaries": [[0, 1e-3], [10, 1e-4], [110, 5e-5]]}},
        "benchmark": {"a": 2000.0, "b": 3000.0, "c_test": 3000.0,
                      "reference_r2": {"q1": 0.957557, "q2": 0.98481, "q3": 0.9863088},
                      "reference_test_r2": 0.9943279},
    },
    "triangle": {
        "name": "triangle",
        "domain": {"shape": "triangle", "vertices": [[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]]},
        "resolution": 67,
        "boundary": {"preset": "homogeneous"},
        "conductivity": {"kind": "constant", "k0": 1.0},
        "gpr": {"groups": [{"kernel": {"l": 0.3, "sigma": 150.0}, "count": 200}]},
        "network": {"branch_hidden": [], "trunk_hidden": [200, 200, 200, 200], "latent_dim": 150},
        "train": {"epochs": 100, "batch_size": 1024, "lr_schedule": _EXPONENTIAL},
        "benchmark": {"a": 2000.0, "b": 3000.0, "c_test": 3000.0,
                      "reference_r2": {"q1": 0.9997, "q2": 0.999628, "q3": 0.9995758},
                      "reference_test_r2": 0.99995},
    },
    "annulus": {
        "name": "annulus",
        "domain": {"shape": "annulus", "center": [0.5, 0.5], "r_inner": 0.2, "r_outer": 0.4},
        "resolution": 96,
        "boundary": {"preset": "homogeneous"},
        "conductivity": {"kind": "constant", "k0": 1.0},
        "gpr": {"groups": [{"kernel": {"l": 0.2, "sigma": 60.0}, "count": 200}]},
        "network": {"branch_hidden": [], "trunk_hidden": [150, 150, 150, 150], "latent_dim": 200},
        "train": {"epochs": 200, "batch_size": 1024, "lr_schedule": _EXPONENTIAL},
        "benchmark": {"a": 2000.0, "b": 12000.0, "c_test": 30000.0,
                      "reference_r2": {"q1": 0.99644, "q2": 0.99365, "q3": 0.989743},
                      "reference_test_r2": 0.99937},
    },
}


def _switches_variant(old: Dict[str, Any], new: Dict[str, Any]) -> bool:
    return any(tag in new and new[tag] != old.get(tag) for tag in ("kind", "shape", "preset", "polynomial"))


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; lists and scalars in `override` replace those in `base`.

    A dict whose variant tag ("kind", "shape", boundary "preset" or "polynomial")
    changes replaces the old one whole.
    """
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and not _switches_variant(out[key], value):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def env_overrides() -> Dict[str, Any]:
    load_dotenv()
    out: Dict[str, Any] = {}
    workers = os.getenv("HEATOP_WORKERS")
    if workers:
        try:
            out["workers"] = int(workers)
        except ValueError:
            raise ConfigError(f"HEATOP_WORKERS must be an integer, got {workers!r}") from None
    output_dir = os.getenv("HEATOP_OUTPUT_DIR")
    if output_dir:
        out["output_dir"] = output_dir
    return out


def load_config(path=None, preset: Optional[str] = None, seed: Optional[int] = None,
                use_env: bool = True) -> RunConfig:
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"Unknown preset {preset!r}; available: {', '.join(PRESETS)}")
    data: Dict[str, Any] = copy.deepcopy(PRESETS[preset]) if preset else {}
    if path is not None:
        try:
            file_data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(file_data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        data = deep_merge(data, file_data)
    if not data:
        data = copy.deepcopy(PRESETS[DEFAULT_PRESET])
    if seed is not None:
        data = deep_merge(data, {"seed": seed, "split": {"seed": seed}, "train": {"seed": seed}})
    if use_env:
        data = deep_merge(data, env_overrides())
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration:\n{e}") from e
    logger.info(f"Loaded config {cfg.name!r} (preset={preset}, file={path}, seed={cfg.seed}, workers={cfg.workers})")
    return cfg
