"""
DeepONet training data in compact factored form.

A dataset holds n input functions sampled at m sensor points and their
temperature at p output locations:

    branch_inputs  (n, m)    q at sensor_coords
    sensor_coords  (m, 2)
    output_coords  (p, 2)
    output_values  (n, p)    T at output_coords

The row-per-triple layout (n*p rows of (u, y, G(u)(y))) is never stored;
`iter_triples` and `materialize` recover it on demand.

On disk a dataset is a directory with `manifest.json` and one raw file per
array of little-endian float64 values in row-major order.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .domain import Grid
from .errors import ConfigError, DatasetFormatError, NumericError, ShapeError
from .fd_source import SourceField
from .gpr import TemperatureField

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ARRAY_DTYPE = "<f8"
ARRAY_NAMES = ("branch_inputs", "sensor_coords", "output_coords", "output_values")


class SplitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    train_fraction: float = Field(0.8, gt=0, lt=1)
    seed: int = 0


class NormalizationSpec(BaseModel):
    """Global z-score statistics; identity when disabled"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    enabled: bool = False
    branch_mean: float = 0.0
    branch_std: float = 1.0
    output_mean: float = 0.0
    output_std: float = 1.0

    def branch(self, u: np.ndarray) -> np.ndarray:
        return (u - self.branch_mean) / self.branch_std if self.enabled else u

    def output(self, t: np.ndarray) -> np.ndarray:
        return (t - self.output_mean) / self.output_std if self.enabled else t

    def denormalize(self, t: np.ndarray) -> np.ndarray:
        return t * self.output_std + self.output_mean if self.enabled else t


class DatasetMeta(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n: int = Field(ge=1)
    m: int = Field(ge=1)
    p: int = Field(ge=1)
    domain: Optional[Dict[str, Any]] = None
    resolution: Optional[int] = None
    grid: Dict[str, Any] = Field(default_factory=dict)
    # True when output_coords are exactly the grid points in grid order
    output_on_grid: bool = True
    kernels: List[Dict[str, Any]] = Field(default_factory=list)
    noise: Optional[Dict[str, Any]] = None
    seeds: Dict[str, int] = Field(default_factory=dict)
    conductivity: Dict[str, Any] = Field(default_factory=lambda: {"kind": "constant", "k0": 1.0})
    boundary: Optional[Dict[str, Any]] = None
    normalization: NormalizationSpec = Field(default_factory=NormalizationSpec)
    groups: List[int] = Field(default_factory=list)
    function_ids: List[int] = Field(default_factory=list)


@dataclass
class FieldSample:
    T: TemperatureField
    q: SourceField
    group: int = 0


@dataclass(frozen=True, eq=False)
class OperatorDataset:
    branch_inputs: np.ndarray
    sensor_coords: np.ndarray
    output_coords: np.ndarray
    output_values: np.ndarray
    meta: DatasetMeta

    def __post_init__(self):
        n, m, p = self.meta.n, self.meta.m, self.meta.p
        expected = {"branch_inputs": (n, m), "sensor_coords": (m, 2), "output_coords": (p, 2), "output_values": (n, p)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, meta says {shape}")
        if len(self.meta.groups) != n or len(self.meta.function_ids) != n:
            raise ShapeError(f"meta lists {len(self.meta.groups)} groups and {len(self.meta.function_ids)} ids for n={n}")

    @property
    def n(self) -> int:
        return self.meta.n

    @property
    def m(self) -> int:
        return self.meta.m

    @property
    def p(self) -> int:
        return self.meta.p

    def __len__(self) -> int:
        return self.n * self.p


def _normalization(branch: np.ndarray, outputs: np.ndarray) -> NormalizationSpec:
    bstd, ostd = float(branch.std()), float(outputs.std())
    return NormalizationSpec(enabled=True, branch_mean=float(branch.mean()), branch_std=bstd if bstd > 0 else 1.0,
                             output_mean=float(outputs.mean()), output_std=ostd if ostd > 0 else 1.0)


def assemble(samples: Sequence[FieldSample], grid: Grid, *, normalize: bool = False,
             output_idx: Optional[np.ndarray] = None, **meta_fields) -> OperatorDataset:
    """Stack samples into an OperatorDataset; extra keyword arguments go into meta"""
    if len(samples) < 1:
        raise ShapeError("assemble needs at least one sample")
    sensors = grid.points[grid.sensor_idx]
    for i, s in enumerate(samples):
        if s.q.grid is not grid and not np.array_equal(s.q.grid.points[s.q.grid.sensor_idx], sensors):
            raise ShapeError(f"sample {i} heat source lives on a different grid")
        if s.T.values.shape != (grid.n_points,):
            raise ShapeError(f"sample {i} temperature has {s.T.values.shape[0]} values, grid has {grid.n_points}")

    on_grid = output_idx is None
    out_idx = np.arange(grid.n_points) if on_grid else np.asarray(output_idx, dtype=np.int64)
    branch = np.stack([s.q.values for s in samples])
    outputs = np.stack([s.T.values[out_idx] for s in samples])
    if not (np.all(np.isfinite(branch)) and np.all(np.isfinite(outputs))):
        raise NumericError("assembled dataset contains non-finite entries")

    meta = DatasetMeta(
        n=len(samples), m=branch.shape[1], p=len(out_idx),
        domain=grid.domain.model_dump(mode="json") if grid.domain is not None else None,
        resolution=grid.resolution, grid=grid.describe(), output_on_grid=on_grid,
        normalization=_normalization(branch, outputs) if normalize else NormalizationSpec(),
        groups=[int(s.group) for s in samples], function_ids=list(range(len(samples))),
        **meta_fields,
    )
    ds = OperatorDataset(branch_inputs=branch, sensor_coords=grid.points[grid.sensor_idx].copy(),
                         output_coords=grid.points[out_idx].copy(), output_values=outputs, meta=meta)
    logger.info(f"Assembled dataset: n={ds.n}, m={ds.m}, p={ds.p}")
    return ds


def select(ds: OperatorDataset, indices) -> OperatorDataset:
    """Sub-dataset of the given function rows, meta kept consistent"""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("select needs at least one function index")
    meta = ds.meta.model_copy(update={
        "n": int(idx.size),
        "groups": [ds.meta.groups[i] for i in idx],
        "function_ids": [ds.meta.function_ids[i] for i in idx],
    })
    return OperatorDataset(branch_inputs=ds.branch_inputs[idx], sensor_coords=ds.sensor_coords,
                           output_coords=ds.output_coords, output_values=ds.output_values[idx], meta=meta)


def select_group(ds: OperatorDataset, group: int) -> OperatorDataset:
    idx = [i for i, g in enumerate(ds.meta.groups) if g == group]
    if not idx:
        raise ConfigError(f"dataset has no functions in group {group} (groups: {sorted(set(ds.meta.groups))})")
    return select(ds, idx)


def split(ds: OperatorDataset, cfg: Optional[SplitConfig] = None) -> Tuple[OperatorDataset, OperatorDataset]:
    """Shuffle whole functions by seed and cut at round(train_fraction * n)"""
    cfg = cfg or SplitConfig()
    n_train = int(np.floor(cfg.train_fraction * ds.n + 0.5))
    if ds.n < 2 or n_train < 1 or n_train >= ds.n:
        raise ConfigError(f"cannot split {ds.n} functions at fraction {cfg.train_fraction} into two nonempty parts")
    perm = np.random.default_rng(cfg.seed).permutation(ds.n)
    train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    logger.info(f"Split {ds.n} functions into {len(train_idx)} train / {len(test_idx)} test (seed {cfg.seed})")
    return select(ds, train_idx), select(ds, test_idx)


def iter_triples(ds: OperatorDataset) -> Iterator[Tuple[np.ndarray, np.ndarray, float]]:
    for i in range(ds.n):
        u = ds.branch_inputs[i]
        for j in range(ds.p):
            yield u, ds.output_coords[j], float(ds.output_values[i, j])


def materialize(ds: OperatorDataset) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(np x m, np x 2, np) row-per-triple arrays, function-major"""
    return (np.repeat(ds.branch_inputs, ds.p, axis=0),
            np.tile(ds.output_coords, (ds.n, 1)),
            ds.output_values.reshape(-1).copy())


def save(ds: OperatorDataset, path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for name in ARRAY_NAMES:
            arr = np.ascontiguousarray(getattr(ds, name), dtype=ARRAY_DTYPE)
            arr.tofile(path / f"{name}.bin")
            arrays[name] = {"file": f"{name}.bin", "shape": list(arr.shape)}
        manifest = {
            "format_version": FORMAT_VERSION,
            "kind": "operator_dataset",
            "byte_order": "little",
            "dtype": "float64",
            "arrays": arrays,
            "meta": ds.meta.model_dump(mode="json"),
        }
        tmp = path / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2))
        os.replace(tmp, path / "manifest.json")
    except OSError as e:
        raise DatasetFormatError(f"could not write dataset to {path}: {e}") from e
    logger.info(f"Saved dataset to {path}")
    return path


def read_manifest(path: Path, kind: str, version: int, error=DatasetFormatError) -> Dict[str, Any]:
    try:
        manifest = json.loads((Path(path) / "manifest.json").read_text())
    except FileNotFoundError:
        raise error(f"no manifest.json in {path}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise error(f"unreadable manifest in {path}: {e}") from e
    if manifest.get("kind") != kind:
        raise error(f"{path} holds {manifest.get('kind')!r}, expected {kind!r}")
    if manifest.get("format_version") != version:
        raise error(f"{path} has format version {manifest.get('format_version')}, this build reads {version}")
    if manifest.get("byte_order") != "little" or manifest.get("dtype") != "float64":
        raise error(f"{path} declares {manifest.get('byte_order')} {manifest.get('dtype')}; only little float64 is supported")
    return manifest


def read_array(path: Path, entry: Dict[str, Any], expected_shape: Tuple[int, ...], error=DatasetFormatError) -> np.ndarray:
    shape = tuple(int(s) for s in entry["shape"])
    if shape != tuple(expected_shape):
        raise error(f"{entry['file']}: manifest shape {shape} disagrees with expected {tuple(expected_shape)}")
    file = Path(path) / entry["file"]
    try:
        flat = np.fromfile(file, dtype=ARRAY_DTYPE)
    except OSError as e:
        raise error(f"cannot read {file}: {e}") from e
    count = int(np.prod(shape))
    if flat.size != count:
        kind = "truncated" if flat.size < count else "oversized"
        raise error(f"{file.name} is {kind}: {flat.size} values, manifest expects {count}")
    return flat.astype(np.float64).reshape(shape)


def load(path) -> OperatorDataset:
    path = Path(path)
    manifest = read_manifest(path, "operator_dataset", FORMAT_VERSION)
    try:
        meta = DatasetMeta.model_validate(manifest["meta"])
    except (KeyError, ValidationError) as e:
        raise DatasetFormatError(f"invalid dataset meta in {path}: {e}") from e
    expected = {"branch_inputs": (meta.n, meta.m), "sensor_coords": (meta.m, 2),
                "output_coords": (meta.p, 2), "output_values": (meta.n, meta.p)}
    arrays = {}
    for name in ARRAY_NAMES:
        entry = manifest.get("arrays", {}).get(name)
        if entry is None:
            raise DatasetFormatError(f"manifest in {path} lists no {name}")
        arrays[name] = read_array(path, entry, expected[name])
    ds = OperatorDataset(meta=meta, **arrays)
    logger.info(f"Loaded dataset from {path}: n={ds.n}, m={ds.m}, p={ds.p}")
    return ds
