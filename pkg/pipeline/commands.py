"""
Command implementations behind the heat_operator.py entry point.

Each cmd_* function takes a validated RunConfig plus paths, writes its
artifacts under the run directory and returns a result object the CLI
summarizes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import RunConfig
from .dataset import OperatorDataset, SplitConfig, load, save, select_group, split
from .deeponet import (TrainReport, init_model, load_model, predict_field, predict_values, save_model, train)
from .domain import BoundarySpec, Grid, build_grid
from .errors import ConfigError, DatasetFormatError, ShapeError, StorageError, TrainingDiverged
from .fd_source import SourceField, parse_conductivity
from .generate import GenerationResult, generate_samples
from .manufactured import manufactured_pair
from .metrics import Metrics, evaluate, metrics_table, quantile_summary, relative_l2
from .oracle import SolveConfig, solve_poisson
from .plots import export_field_csv, plot_fields
from .progress import RunState

logger = logging.getLogger(__name__)

VERIFY_THRESHOLD = 0.05


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, default=float))
    except OSError as e:
        raise StorageError(f"could not write {path}: {e}") from e
    return path


def cmd_generate(cfg: RunConfig, out=None, progress_callback: Optional[Callable] = None) -> GenerationResult:
    """Generate and save the dataset; timings land in generation_report.json next to it"""
    out = Path(out) if out is not None else cfg.run_dir / "dataset"
    state = RunState()
    state.start(f"generation for {cfg.name}")
    result = generate_samples(cfg, state=state, progress_callback=progress_callback)
    with state.phase("save"):
        save(result.dataset, out)
    state.finish()
    result.timings = dict(state.timings)
    _write_json(out.parent / "generation_report.json", {
        "dataset": str(out),
        "n": result.dataset.n, "m": result.dataset.m, "p": result.dataset.p,
        "timings": result.timings,
        "largest_factorization": result.largest_factorization,
        "n_boundary": int(len(result.grid.boundary_idx)),
        "n_points": result.grid.n_points,
        "rejected_fields": result.rejected,
    })
    return result


@dataclass
class TrainResult:
    model_path: Path
    report: TrainReport
    n_train: int
    n_test: int


def load_split(dataset_path, split_cfg: SplitConfig, group: Optional[int] = None
               ) -> Tuple[OperatorDataset, OperatorDataset]:
    """Train/test parts of a stored dataset; with `group`, the split is taken within that group only"""
    ds = load(dataset_path)
    if group is not None:
        ds = select_group(ds, group)
    return split(ds, split_cfg)


def cmd_train(cfg: RunConfig, dataset_path, out=None, warm_start=None, group: Optional[int] = None,
              progress_callback: Optional[Callable] = None) -> TrainResult:
    train_ds, test_ds = load_split(dataset_path, cfg.split, group)

    warm_start = warm_start or cfg.train.warm_start
    if warm_start:
        model = load_model(warm_start)
        if model.m != train_ds.m:
            raise ShapeError(f"warm-start model expects m={model.m}, dataset has m={train_ds.m}")
        logger.info(f"Warm start from {warm_start}")
    else:
        branch, trunk = cfg.network.specs(train_ds.m)
        model = init_model(branch, trunk, cfg.train.seed)

    suffix = f"_group{group}" if group is not None else ""
    out = Path(out) if out is not None else cfg.run_dir / f"model{suffix}"
    try:
        model, report = train(model, train_ds, test_ds, cfg.train, progress_callback=progress_callback)
    except TrainingDiverged as e:
        if e.report is not None:
            _write_json(out.parent / f"train_report{suffix}.json", dict(e.report.as_dict(), diverged=True))
        raise
    save_model(model, out)
    _write_json(out.parent / f"train_report{suffix}.json",
                dict(report.as_dict(), model=str(out), warm_start=str(warm_start) if warm_start else None,
                     group=group, n_train=train_ds.n, n_test=test_ds.n,
                     reference_test_r2=cfg.benchmark.reference_test_r2))
    return TrainResult(model_path=out, report=report, n_train=train_ds.n, n_test=test_ds.n)


def _grid_and_physics(cfg: RunConfig):
    grid = build_grid(cfg.domain, cfg.resolution)
    return grid, BoundarySpec.from_config(cfg.boundary), parse_conductivity(cfg.conductivity)


@dataclass
class BenchmarkResult:
    which: str
    metrics: Metrics
    reference_r2: Optional[float]
    files: List[Path] = field(default_factory=list)


def cmd_testfn(cfg: RunConfig, model_path, which: str, a: Optional[float] = None, b: Optional[float] = None,
               c_test: Optional[float] = None, out=None, plot: bool = True) -> BenchmarkResult:
    """Benchmark source -> oracle reference and model prediction -> metrics and exported fields"""
    a = cfg.benchmark.a if a is None else a
    b = cfg.benchmark.b if b is None else b
    c_test = cfg.benchmark.c_test if c_test is None else c_test
    model = load_model(model_path)
    grid, bc, kmodel = _grid_and_physics(cfg)
    pair = manufactured_pair("benchmark", which=which, a=a, b=b, c_test=c_test)

    reference = solve_poisson(grid, pair.q, bc, kmodel, cfg.solve)
    prediction = predict_field(model, SourceField.from_function(pair.q, grid), grid)
    metrics = evaluate(prediction.values, reference.values)

    out = Path(out) if out is not None else cfg.run_dir / "testfn"
    files = [export_field_csv(grid.points, prediction.values, out / f"{which}_prediction.csv"),
             export_field_csv(grid.points, reference.values, out / f"{which}_oracle.csv")]
    if plot:
        files += plot_fields(files[:2], out, triptych=True)
    ref = cfg.benchmark.reference_r2.get(which)
    _write_json(out / f"{which}_metrics.json",
                dict(metrics.as_dict(), which=which, a=a, b=b, c_test=c_test, reference_r2=ref))
    logger.info(f"Benchmark {which}: R² {metrics.r2}, normalized L2 {metrics.normalized_l2} (reference R² {ref})")
    return BenchmarkResult(which=which, metrics=metrics, reference_r2=ref, files=files)


def grid_from_meta(ds: OperatorDataset) -> Grid:
    """Rebuild the generation grid recorded in a dataset"""
    if ds.meta.domain is None or ds.meta.resolution is None or not ds.meta.output_on_grid:
        raise DatasetFormatError("dataset does not record a rebuildable grid (domain, resolution, on-grid outputs)")
    grid = build_grid(ds.meta.domain, ds.meta.resolution)
    if grid.n_points != ds.p or len(grid.sensor_idx) != ds.m:
        raise DatasetFormatError(f"rebuilt grid has {grid.n_points} points / {len(grid.sensor_idx)} sensors, "
                                 f"dataset has p={ds.p}, m={ds.m}")
    return grid


@dataclass
class VerifyResult:
    table: pd.DataFrame
    summary: pd.DataFrame
    median: float
    flagged: int


def verify_dataset(ds: OperatorDataset, grid: Optional[Grid] = None, solve_cfg: Optional[SolveConfig] = None,
                   threshold: float = VERIFY_THRESHOLD, progress_callback: Optional[Callable] = None) -> VerifyResult:
    """Oracle-solve every stored source and compare with the stored temperature"""
    grid = grid if grid is not None else grid_from_meta(ds)
    bc = BoundarySpec.from_config(ds.meta.boundary or {"preset": "homogeneous"})
    kmodel = parse_conductivity(ds.meta.conductivity)
    rows = []
    for i in range(ds.n):
        solved = solve_poisson(grid, SourceField(ds.branch_inputs[i], grid), bc, kmodel, solve_cfg)
        err = relative_l2(solved.values, ds.output_values[i])
        rows.append({"function_id": ds.meta.function_ids[i], "group": ds.meta.groups[i],
                     "relative_l2": err, "flagged": err > threshold})
        if progress_callback:
            progress_callback(f"🔍 Verified function {ds.meta.function_ids[i]}: {err:.3%}", i + 1, ds.n,
                              str(ds.meta.function_ids[i]))
    table = pd.DataFrame(rows)
    summary = quantile_summary(table["relative_l2"], "relative_l2")
    result = VerifyResult(table=table, summary=summary, median=float(table["relative_l2"].median()),
                          flagged=int(table["flagged"].sum()))
    logger.info(f"Verified {ds.n} pairs: median relative L2 {result.median:.3%}, {result.flagged} above {threshold:.0%}")
    return result


def cmd_verify(dataset_path, solve_cfg: Optional[SolveConfig] = None, out=None,
               threshold: float = VERIFY_THRESHOLD, progress_callback: Optional[Callable] = None) -> VerifyResult:
    result = verify_dataset(load(dataset_path), solve_cfg=solve_cfg, threshold=threshold,
                            progress_callback=progress_callback)
    out = Path(out) if out is not None else Path(dataset_path).parent / "verify"
    try:
        out.mkdir(parents=True, exist_ok=True)
        result.table.to_csv(out / "verify_pairs.csv", index=False)
        result.summary.to_csv(out / "verify_summary.csv")
    except OSError as e:
        raise StorageError(f"could not write verification report to {out}: {e}") from e
    return result


@dataclass
class SolveResult:
    values: np.ndarray
    path: Path
    relative_l2: Optional[float] = None


def cmd_solve(cfg: RunConfig, source: str, which: Optional[str] = None, out=None) -> SolveResult:
    """Oracle solve of a manufactured or benchmark source on the configured grid"""
    grid, bc, kmodel = _grid_and_physics(cfg)
    pair = manufactured_pair(source, which=which, a=cfg.benchmark.a, b=cfg.benchmark.b, c_test=cfg.benchmark.c_test)
    if pair.T is not None:
        # manufactured pairs carry their own homogeneous boundary data
        bc = pair.boundary
    T = solve_poisson(grid, pair.q, bc, kmodel, cfg.solve)
    err = None
    if pair.T is not None:
        exact = pair.T(grid.points[:, 0], grid.points[:, 1])
        err = relative_l2(T.values, exact)
        logger.info(f"{pair.name}: relative L2 vs analytic solution {err:.3e}")
    out = Path(out) if out is not None else cfg.run_dir / "solve" / f"{pair.name}.csv"
    return SolveResult(values=T.values, path=export_field_csv(grid.points, T.values, out), relative_l2=err)


def cmd_eval(model_path, dataset_path, cfg: RunConfig, per_field: bool = False,
             group: Optional[int] = None) -> pd.DataFrame:
    """Train/test metrics of a model on the split `cmd_train` used (within `group` when given)"""
    model = load_model(model_path)
    train_ds, test_ds = load_split(dataset_path, cfg.split, group)
    results = {}
    for name, part in (("train", train_ds), ("test", test_ds)):
        pred = predict_values(model, part.branch_inputs, part.output_coords)
        results[name] = evaluate(pred, part.output_values, per_field=per_field)
    table = metrics_table(results, {"test": cfg.benchmark.reference_test_r2} if cfg.benchmark.reference_test_r2 else None)
    logger.info(f"Evaluation ({'per-field' if per_field else 'pooled'}):\n{table.to_string()}")
    return table


def cmd_plot(files: Sequence, out_dir, triptych: bool = False) -> List[Path]:
    if not files:
        raise ConfigError("plot needs at least one field file")
    return plot_fields(list(files), out_dir, triptych=triptych)
