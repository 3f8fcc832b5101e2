"""
Finite-difference reference solver for

    -(k T_x)_x - (k T_y)_y = q   in the domain,   T = T̄ on the boundary.

Flux-conservative 5-point scheme with k at half points taken as the
arithmetic mean of the two neighbours. Unknowns are grid.interior_idx; the
closure rule of the grid guarantees every unknown owns its full stencil.
Temperature-dependent k is handled by Picard iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import sparse
from scipy.sparse.linalg import cg, spsolve
from scipy.spatial import cKDTree

from .domain import BoundarySpec, Grid, boundary_values
from .errors import OracleError, ShapeError, SourceError
from .fd_source import ConstantConductivity, SourceField, conductivity_at, parse_conductivity
from .gpr import TemperatureField

logger = logging.getLogger(__name__)


class SolveConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    linear_tol: float = Field(1e-10, gt=0)
    picard_tol: float = Field(1e-8, gt=0)
    picard_max_iters: int = Field(100, gt=0)
    method: Literal["cg", "direct"] = "cg"
    margin_fill: Literal["nearest", "linear"] = "nearest"


@dataclass
class ResidualReport:
    field: np.ndarray        # per grid point; |T - T̄| on the boundary
    max_norm: float
    interior_max: float
    boundary_max: float


SourceLike = Union[SourceField, Callable, np.ndarray]


def _fill_margin(source: SourceField, grid: Grid, how: str) -> np.ndarray:
    """Extend sensor values to every interior point"""
    q = source.full()
    margin = np.setdiff1d(grid.interior_idx, grid.sensor_idx)
    if len(margin) == 0:
        return q
    if len(grid.sensor_idx) == 0:
        raise SourceError("cannot extend heat source to the margin: grid has no sensor points")
    sensors = grid.points[grid.sensor_idx]
    tree = cKDTree(sensors)
    _, nearest = tree.query(grid.points[margin])
    q_near = source.values[nearest]
    if how == "nearest":
        q[margin] = q_near
        return q
    # two-point inward extrapolation along the margin -> sensor direction
    p = grid.points[margin]
    s1 = sensors[nearest]
    _, second = tree.query(s1 + (s1 - p))
    s2 = sensors[second]
    d1 = np.linalg.norm(s1 - p, axis=1)
    d12 = np.linalg.norm(s2 - s1, axis=1)
    slope = np.divide(q_near - source.values[second], d12, out=np.zeros_like(d12), where=d12 > 0)
    q[margin] = q_near + slope * d1
    return q


def _source_vector(q: SourceLike, grid: Grid, cfg: SolveConfig) -> np.ndarray:
    if isinstance(q, SourceField):
        full = _fill_margin(q, grid, cfg.margin_fill)
    elif callable(q):
        pts = grid.points
        full = np.broadcast_to(np.asarray(q(pts[:, 0], pts[:, 1]), dtype=np.float64), (grid.n_points,)).copy()
    else:
        arr = np.asarray(q, dtype=np.float64)
        if arr.shape == (len(grid.sensor_idx),):
            full = _fill_margin(SourceField(arr, grid), grid, cfg.margin_fill)
        elif arr.shape == (grid.n_points,):
            full = arr.copy()
        else:
            raise ShapeError(f"heat source has shape {arr.shape}; expected {grid.n_points} points "
                             f"or {len(grid.sensor_idx)} sensors")
    bad = ~np.isfinite(full[grid.interior_idx])
    if bad.any():
        x, y = grid.points[grid.interior_idx[np.argmax(bad)]]
        raise SourceError(f"Heat source is not finite at interior point ({x:.6g}, {y:.6g})")
    return full


def _faces(grid: Grid, k: np.ndarray):
    """(row, col, k_half) for every interior point and each of its axis neighbours"""
    rows, cols, weights = [], [], []
    interior = grid.interior_idx
    for axis in (0, 1):
        for offset in (-1, 1):
            nb = grid.neighbor(axis, offset)[interior]
            ok = nb >= 0
            rows.append(interior[ok])
            cols.append(nb[ok])
            weights.append(0.5 * (k[interior[ok]] + k[nb[ok]]))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(weights)


def _linear_solve(grid: Grid, k: np.ndarray, q: np.ndarray, tbar_full: np.ndarray, cfg: SolveConfig) -> np.ndarray:
    interior = grid.interior_idx
    n = len(interior)
    pos = np.full(grid.n_points, -1, dtype=np.int64)
    pos[interior] = np.arange(n)

    rows, cols, w = _faces(grid, k)
    r = pos[rows]
    diag = np.bincount(r, weights=w, minlength=n)
    inner = pos[cols] >= 0
    A = sparse.coo_matrix(
        (np.concatenate([diag, -w[inner]]),
         (np.concatenate([np.arange(n), r[inner]]), np.concatenate([np.arange(n), pos[cols[inner]]]))),
        shape=(n, n),
    ).tocsr()
    b = grid.h ** 2 * q[interior] + np.bincount(r[~inner], weights=w[~inner] * tbar_full[cols[~inner]], minlength=n)

    if cfg.method == "direct":
        x = spsolve(A.tocsc(), b)
    else:
        jacobi = sparse.diags(1.0 / diag)
        x, info = cg(A, b, rtol=cfg.linear_tol, atol=0.0, M=jacobi, maxiter=max(1000, 10 * n))
        if info != 0:
            raise OracleError(f"conjugate gradient did not reach rtol {cfg.linear_tol:g} on {n} unknowns (info={info})")
    if not np.all(np.isfinite(x)):
        raise OracleError(f"linear solve on {n} unknowns produced non-finite values")
    out = tbar_full.copy()
    out[interior] = x
    return out


def solve_poisson(grid: Grid, q: SourceLike, bc: BoundarySpec, kmodel=None,
                  cfg: Optional[SolveConfig] = None) -> TemperatureField:
    cfg = cfg or SolveConfig()
    kmodel = parse_conductivity(kmodel if kmodel is not None else ConstantConductivity())
    q_full = _source_vector(q, grid, cfg)
    tbar_full = np.zeros(grid.n_points)
    tbar_full[grid.boundary_idx] = boundary_values(grid, bc)

    T = tbar_full.copy()
    if isinstance(kmodel, ConstantConductivity):
        T = _linear_solve(grid, conductivity_at(kmodel, T, grid), q_full, tbar_full, cfg)
        logger.info(f"Oracle solved {len(grid.interior_idx)} unknowns ({cfg.method})")
        return TemperatureField(T, "oracle")

    for it in range(1, cfg.picard_max_iters + 1):
        T_new = _linear_solve(grid, conductivity_at(kmodel, T, grid), q_full, tbar_full, cfg)
        change = np.linalg.norm(T_new - T) / max(np.linalg.norm(T_new), np.finfo(float).tiny)
        T = T_new
        logger.debug(f"Picard iteration {it}: relative change {change:.3e}")
        if change < cfg.picard_tol:
            logger.info(f"Oracle converged in {it} Picard iterations ({len(grid.interior_idx)} unknowns)")
            return TemperatureField(T, "oracle")
    raise OracleError(f"Picard iteration did not converge in {cfg.picard_max_iters} iterations "
                      f"(last relative change {change:.3e}, tolerance {cfg.picard_tol:g})")


def residual(T, q: SourceLike, bc: BoundarySpec, kmodel, grid: Grid,
             cfg: Optional[SolveConfig] = None) -> ResidualReport:
    """Discrete-equation residual at interior unknowns and |T - T̄| on the boundary"""
    cfg = cfg or SolveConfig()
    values = np.asarray(getattr(T, "values", T), dtype=np.float64)
    if values.shape != (grid.n_points,):
        raise ShapeError(f"temperature has shape {values.shape}, grid has {grid.n_points} points")
    kmodel = parse_conductivity(kmodel if kmodel is not None else ConstantConductivity())
    q_full = _source_vector(q, grid, cfg)
    k = conductivity_at(kmodel, values, grid)

    rows, cols, w = _faces(grid, k)
    lap = np.bincount(rows, weights=w * (values[rows] - values[cols]), minlength=grid.n_points) / grid.h ** 2
    field = np.zeros(grid.n_points)
    field[grid.interior_idx] = lap[grid.interior_idx] - q_full[grid.interior_idx]
    field[grid.boundary_idx] = np.abs(values[grid.boundary_idx] - boundary_values(grid, bc))

    interior_max = float(np.max(np.abs(field[grid.interior_idx]))) if len(grid.interior_idx) else 0.0
    boundary_max = float(np.max(field[grid.boundary_idx])) if len(grid.boundary_idx) else 0.0
    return ResidualReport(field=field, max_norm=max(interior_max, boundary_max),
                          interior_max=interior_max, boundary_max=boundary_max)
