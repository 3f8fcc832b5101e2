"""
Heat-source recovery by central differences:

    q = -(k T_x)_x - (k T_y)_y

Derivatives are nested first differences, so q needs the ±h and ±2h
neighbours along both axes and is defined on grid.sensor_idx only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Annotated, Callable, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter

from .domain import Grid
from .errors import ShapeError, SourceError

logger = logging.getLogger(__name__)


class ConstantConductivity(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["constant"] = "constant"
    k0: float = Field(1.0, gt=0)

    def evaluate(self, T: np.ndarray) -> np.ndarray:
        return np.full(np.shape(T), self.k0, dtype=np.float64)


class AffineConductivity(BaseModel):
    """k = alpha + beta * T"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["affine_in_T"] = "affine_in_T"
    alpha: float = 1.0
    beta: float = 0.01

    def evaluate(self, T: np.ndarray) -> np.ndarray:
        return self.alpha + self.beta * np.asarray(T, dtype=np.float64)


ConductivityModel = Annotated[Union[ConstantConductivity, AffineConductivity], Field(discriminator="kind")]
_conductivity_adapter = TypeAdapter(ConductivityModel)


def parse_conductivity(data) -> ConductivityModel:
    if isinstance(data, (ConstantConductivity, AffineConductivity)):
        return data
    return _conductivity_adapter.validate_python(data)


def conductivity_at(kmodel, T: np.ndarray, grid: Grid) -> np.ndarray:
    """k at every grid point; rejects nonpositive conductivity"""
    k = parse_conductivity(kmodel).evaluate(T)
    bad = ~(k > 0)
    if bad.any():
        i = int(np.argmax(bad))
        x, y = grid.points[i]
        raise SourceError(f"Conductivity {k[i]:.6g} is not positive at point ({x:.6g}, {y:.6g})")
    return k


@dataclass
class SourceField:
    """Heat source on grid.sensor_idx"""
    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.grid.sensor_idx),):
            raise ShapeError(f"source has shape {self.values.shape}, grid has {len(self.grid.sensor_idx)} sensors")
        if not np.all(np.isfinite(self.values)):
            raise SourceError("heat source contains non-finite values")

    @classmethod
    def from_function(cls, q_fn: Callable, grid: Grid) -> "SourceField":
        pts = grid.points[grid.sensor_idx]
        return cls(np.broadcast_to(q_fn(pts[:, 0], pts[:, 1]), (len(pts),)).astype(np.float64), grid)

    def full(self) -> np.ndarray:
        """Per-point vector with NaN off the sensor set"""
        out = np.full(self.grid.n_points, np.nan)
        out[self.grid.sensor_idx] = self.values
        return out


def _axis(axis) -> int:
    if axis in ("x", 0):
        return 0
    if axis in ("y", 1):
        return 1
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


def central_diff(field: np.ndarray, grid: Grid, axis) -> np.ndarray:
    """(f(.+h) - f(.-h)) / 2h along axis; NaN where a neighbour is missing"""
    f = np.asarray(field, dtype=np.float64)
    if f.shape != (grid.n_points,):
        raise ShapeError(f"field has shape {f.shape}, grid has {grid.n_points} points")
    a = _axis(axis)
    plus, minus = grid.neighbor(a, 1), grid.neighbor(a, -1)
    out = np.full(grid.n_points, np.nan)
    ok = (plus >= 0) & (minus >= 0)
    out[ok] = (f[plus[ok]] - f[minus[ok]]) / (2.0 * grid.h)
    return out


def compute_source(T, kmodel, grid: Grid) -> SourceField:
    values = np.asarray(getattr(T, "values", T), dtype=np.float64)
    k = conductivity_at(kmodel, values, grid)
    flux_x = k * central_diff(values, grid, "x")
    flux_y = k * central_diff(values, grid, "y")
    q = -central_diff(flux_x, grid, "x") - central_diff(flux_y, grid, "y")
    return SourceField(q[grid.sensor_idx], grid)
