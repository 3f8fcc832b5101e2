"""
FEM-free training-data generation:

    grid -> boundary data -> GPR posterior fields (+ heterogeneous lift)
         -> central-difference heat source -> OperatorDataset

This module never imports the finite-difference oracle; temperature fields
come from the GPR sampler only and the heat source is derived from them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional

import numpy as np

from .dataset import FieldSample, OperatorDataset, assemble
from .domain import BoundarySpec, Grid, boundary_values, build_grid
from .errors import NumericError, SourceError
from .fd_source import compute_source, parse_conductivity
from .gpr import (KernelConfig, NoiseConfig, PathwiseSampler, TemperatureField, compose_heterogeneous,
                  condition_on_boundary, sample_posterior, track_factorizations)
from .progress import RunState

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)

# rounds of redraws allowed when fields give nonpositive conductivity
MAX_REDRAW_ROUNDS = 20


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass
class GenerationResult:
    dataset: OperatorDataset
    grid: Grid
    timings: Dict[str, float]
    factorization_sizes: List[int] = field(default_factory=list)
    rejected: int = 0

    @property
    def largest_factorization(self) -> int:
        return max(self.factorization_sizes, default=0)


class _Sampler:
    """Posterior draws for one kernel and one set of boundary data"""

    def __init__(self, kind: str, grid: Grid, kernel: KernelConfig, tbar: np.ndarray, noise: NoiseConfig, workers: int):
        self.workers = workers
        if kind == "pathwise":
            self._pathwise = PathwiseSampler(grid, kernel, tbar, noise)
            self._post = None
        else:
            self._pathwise = None
            self._post = condition_on_boundary(grid, kernel, tbar, noise)

    def sample(self, seed: int, count: int) -> List[TemperatureField]:
        if self._pathwise is not None:
            return self._pathwise.sample(seed, count, workers=self.workers)
        return sample_posterior(self._post, seed, count, workers=self.workers)


def generate_samples(cfg: "RunConfig", state: Optional[RunState] = None,
                     progress_callback: Optional[Callable] = None) -> GenerationResult:
    """
    Build the grid, draw every configured GPR group and recover the heat sources.

    Args:
        cfg: run configuration (domain, boundary, conductivity, gpr groups, seed, workers)
        state: optional RunState receiving phase timings
        progress_callback: Optional callback for progress updates
                          Called with (message, processed_count, total_count, current_group)
    """
    state = state if state is not None else RunState()
    kmodel = parse_conductivity(cfg.conductivity)
    noise = cfg.gpr.noise
    total = sum(g.count for g in cfg.gpr.groups)
    seeds: Dict[str, int] = {"run": cfg.seed}

    with track_factorizations() as sizes:
        with state.phase("grid"):
            grid = build_grid(cfg.domain, cfg.resolution)
            bc = BoundarySpec.from_config(cfg.boundary)
            tbar = boundary_values(grid, bc)

        lift: Optional[TemperatureField] = None
        group_tbar = tbar
        if cfg.gpr.lift is not None:
            with state.phase("gpr_factorization"):
                lift_sampler = _Sampler(cfg.gpr.sampler, grid, cfg.gpr.lift, tbar, noise, cfg.workers)
            seeds["lift"] = derive_seed(cfg.seed, 2)
            with state.phase("gpr_sampling"):
                lift = lift_sampler.sample(seeds["lift"], 1)[0]
            group_tbar = np.zeros_like(tbar)
            logger.info(f"Drew heterogeneous lift field (l={cfg.gpr.lift.l}, sigma={cfg.gpr.lift.sigma})")

        samples: List[FieldSample] = []
        rejected = 0
        if progress_callback:
            progress_callback(f"🔄 Generating {total} temperature profiles...", 0, total, None)
        for g, group in enumerate(cfg.gpr.groups):
            with state.phase("gpr_factorization"):
                sampler = _Sampler(cfg.gpr.sampler, grid, group.kernel, group_tbar, noise, cfg.workers)
            kept: List[FieldSample] = []
            for rnd in range(MAX_REDRAW_ROUNDS):
                need = group.count - len(kept)
                if need == 0:
                    break
                seed = derive_seed(cfg.seed, 1, g, rnd)
                seeds[f"group_{g}" if rnd == 0 else f"group_{g}_redraw_{rnd}"] = seed
                with state.phase("gpr_sampling"):
                    fields = sampler.sample(seed, need)
                    if lift is not None:
                        fields = compose_heterogeneous(lift, fields)
                with state.phase("fd"):
                    for T in fields:
                        try:
                            kept.append(FieldSample(T=T, q=compute_source(T, kmodel, grid), group=g))
                        except SourceError as e:
                            rejected += 1
                            logger.debug(f"Discarded field {T.stream} of group {g}: {e}")
                if progress_callback:
                    progress_callback(f"📊 Group {g}: {len(kept)}/{group.count} profiles", len(samples) + len(kept),
                                      total, f"group {g}")
            if len(kept) < group.count:
                raise NumericError(f"group {g}: only {len(kept)} of {group.count} fields give positive conductivity "
                                   f"after {MAX_REDRAW_ROUNDS} rounds")
            samples.extend(kept)

        if rejected:
            logger.warning(f"Redrew {rejected} fields whose conductivity was not positive everywhere")
        with state.phase("assemble"):
            kernels = [{"group": g, **grp.kernel.model_dump(), "count": grp.count} for g, grp in enumerate(cfg.gpr.groups)]
            if cfg.gpr.lift is not None:
                kernels.append({"group": "lift", **cfg.gpr.lift.model_dump(), "count": 1})
            ds = assemble(samples, grid, normalize=cfg.normalize,
                          kernels=kernels, noise=noise.model_dump(), seeds=seeds,
                          conductivity=kmodel.model_dump(), boundary=cfg.boundary.model_dump(exclude_none=True))

    largest = max(sizes, default=0)
    logger.info(f"Generated {ds.n} pairs; largest factorized matrix {largest} "
                f"(|boundary| = {len(grid.boundary_idx)}, |points| = {grid.n_points})")
    return GenerationResult(dataset=ds, grid=grid, timings=dict(state.timings),
                            factorization_sizes=list(sizes), rejected=rejected)
