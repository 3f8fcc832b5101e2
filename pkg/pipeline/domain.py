"""
Computational domains and structured grids.

Domains are a unit-scale rectangle, triangle or annulus. A grid is the
Cartesian lattice of spacing h = 1/(resolution - 1), anchored at the
domain's bounding-box corner and masked to the closed domain. Points are
ordered row-major by (y, then x).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Annotated, Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, model_validator

from .errors import BoundaryError, GridError

logger = logging.getLogger(__name__)

MIN_RESOLUTION = 5
# absolute tolerance, in units of h, for "lies on an edge"
EDGE_TOL = 1e-9

Point = Tuple[float, float]


class RectangleSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    shape: Literal["rectangle"] = "rectangle"
    x_range: Tuple[float, float] = (0.0, 1.0)
    y_range: Tuple[float, float] = (0.0, 1.0)

    @model_validator(mode="after")
    def _check_ranges(self):
        if not self.x_range[0] < self.x_range[1] or not self.y_range[0] < self.y_range[1]:
            raise ValueError(f"rectangle ranges must be nonempty, got x={self.x_range} y={self.y_range}")
        return self

    def bounding_box(self) -> Tuple[float, float, float, float]:
        return self.x_range[0], self.y_range[0], self.x_range[1], self.y_range[1]

    def contains(self, x: np.ndarray, y: np.ndarray, tol: float) -> np.ndarray:
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        return (x >= x0 - tol) & (x <= x1 + tol) & (y >= y0 - tol) & (y <= y1 + tol)

    def on_boundary(self, x: np.ndarray, y: np.ndarray, h: float, tol: float) -> np.ndarray:
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        return (np.abs(x - x0) <= tol) | (np.abs(x - x1) <= tol) | (np.abs(y - y0) <= tol) | (np.abs(y - y1) <= tol)


class TriangleSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    shape: Literal["triangle"] = "triangle"
    vertices: Tuple[Point, Point, Point] = ((0.0, 0.0), (1.0, 0.0), (0.5, 1.0))

    @model_validator(mode="after")
    def _check_vertices(self):
        if abs(self._signed_area()) < 1e-12:
            raise ValueError(f"triangle vertices are collinear: {self.vertices}")
        return self

    def _signed_area(self) -> float:
        (ax, ay), (bx, by), (cx, cy) = self.vertices
        return 0.5 * ((bx - ax) * (cy - ay) - (cx - ax) * (by - ay))

    def bounding_box(self) -> Tuple[float, float, float, float]:
        xs = [v[0] for v in self.vertices]
        ys = [v[1] for v in self.vertices]
        return min(xs), min(ys), max(xs), max(ys)

    def _edge_distances(self, x: np.ndarray, y: np.ndarray) -> List[np.ndarray]:
        """Signed distance to each edge line, positive inside"""
        orient = 1.0 if self._signed_area() > 0 else -1.0
        out = []
        for i in range(3):
            (px, py), (qx, qy) = self.vertices[i], self.vertices[(i + 1) % 3]
            length = math.hypot(qx - px, qy - py)
            out.append(orient * ((qx - px) * (y - py) - (qy - py) * (x - px)) / length)
        return out

    def contains(self, x: np.ndarray, y: np.ndarray, tol: float) -> np.ndarray:
        d = self._edge_distances(x, y)
        return (d[0] >= -tol) & (d[1] >= -tol) & (d[2] >= -tol)

    def on_boundary(self, x: np.ndarray, y: np.ndarray, h: float, tol: float) -> np.ndarray:
        d = self._edge_distances(x, y)
        return self.contains(x, y, tol) & ((np.abs(d[0]) <= tol) | (np.abs(d[1]) <= tol) | (np.abs(d[2]) <= tol))


class AnnulusSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    shape: Literal["annulus"] = "annulus"
    center: Point = (0.5, 0.5)
    r_inner: float = 0.2
    r_outer: float = 0.4

    @model_validator(mode="after")
    def _check_radii(self):
        if not 0.0 < self.r_inner < self.r_outer:
            raise ValueError(f"annulus needs 0 < r_inner < r_outer, got {self.r_inner}, {self.r_outer}")
        return self

    def bounding_box(self) -> Tuple[float, float, float, float]:
        cx, cy = self.center
        r = self.r_outer
        return cx - r, cy - r, cx + r, cy + r

    def _radius(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.hypot(x - self.center[0], y - self.center[1])

    def contains(self, x: np.ndarray, y: np.ndarray, tol: float) -> np.ndarray:
        r = self._radius(x, y)
        return (r >= self.r_inner - tol) & (r <= self.r_outer + tol)

    def on_boundary(self, x: np.ndarray, y: np.ndarray, h: float, tol: float) -> np.ndarray:
        r = self._radius(x, y)
        near = (np.abs(r - self.r_inner) < 0.5 * h) | (np.abs(r - self.r_outer) < 0.5 * h)
        return self.contains(x, y, tol) & near


DomainSpec = Annotated[Union[RectangleSpec, TriangleSpec, AnnulusSpec], Field(discriminator="shape")]
_domain_adapter = TypeAdapter(DomainSpec)


def parse_domain(data) -> DomainSpec:
    """Build a DomainSpec from a config mapping such as {"shape": "annulus", ...}"""
    if isinstance(data, (RectangleSpec, TriangleSpec, AnnulusSpec)):
        return data
    return _domain_adapter.validate_python(data)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable point set with boundary / interior / sensor partitions"""
    points: np.ndarray           # (N, 2)
    h: float
    boundary_idx: np.ndarray
    interior_idx: np.ndarray
    sensor_idx: np.ndarray
    lattice_index: np.ndarray    # (N, 2) integer (ix, iy)
    lattice_origin: Tuple[float, float]
    lattice_shape: Tuple[int, int]  # (ny, nx)
    domain: Optional[DomainSpec] = None
    resolution: Optional[int] = None
    _index_map: np.ndarray = field(default=None, repr=False)

    @property
    def n_points(self) -> int:
        return len(self.points)

    def neighbor(self, axis: int, offset: int) -> np.ndarray:
        """Index of the point offset*h away along axis (0 = x, 1 = y), -1 when absent"""
        ny, nx = self.lattice_shape
        ix = self.lattice_index[:, 0] + (offset if axis == 0 else 0)
        iy = self.lattice_index[:, 1] + (offset if axis == 1 else 0)
        valid = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        out = np.full(self.n_points, -1, dtype=np.int64)
        out[valid] = self._index_map[iy[valid], ix[valid]]
        return out

    def to_lattice(self, values: np.ndarray) -> np.ndarray:
        """Scatter a per-point vector onto the (ny, nx) lattice, NaN where masked"""
        out = np.full(self.lattice_shape, np.nan)
        out[self.lattice_index[:, 1], self.lattice_index[:, 0]] = values
        return out

    def lattice_axes(self) -> Tuple[np.ndarray, np.ndarray]:
        ny, nx = self.lattice_shape
        x0, y0 = self.lattice_origin
        return x0 + self.h * np.arange(nx), y0 + self.h * np.arange(ny)

    def describe(self) -> Dict:
        return {
            "domain": self.domain.model_dump(mode="json") if self.domain is not None else None,
            "resolution": self.resolution,
            "h": self.h,
            "n_points": self.n_points,
            "n_boundary": int(len(self.boundary_idx)),
            "n_sensor": int(len(self.sensor_idx)),
        }

    @classmethod
    def from_points(cls, points, boundary_idx, h: float) -> "Grid":
        """Grid over explicit lattice-aligned points (used for 1-D analogues)"""
        points = np.array(points, dtype=np.float64).reshape(-1, 2)
        origin = points.min(axis=0)
        lattice = np.rint((points - origin) / h).astype(np.int64)
        if not np.allclose(origin + lattice * h, points, atol=1e-9 * h, rtol=0):
            raise GridError("points are not aligned to a lattice of spacing h")
        on_edge = np.zeros(len(points), dtype=bool)
        on_edge[np.asarray(boundary_idx, dtype=np.int64)] = True
        return _assemble(points, lattice, (float(origin[0]), float(origin[1])), h, on_edge, None, None)


def _assemble(points, lattice, origin, h, on_edge, domain, resolution) -> Grid:
    nx = int(lattice[:, 0].max()) + 1
    ny = int(lattice[:, 1].max()) + 1
    index_map = np.full((ny, nx), -1, dtype=np.int64)
    index_map[lattice[:, 1], lattice[:, 0]] = np.arange(len(points))
    probe = Grid(points=points, h=h, boundary_idx=np.empty(0, np.int64), interior_idx=np.empty(0, np.int64),
                 sensor_idx=np.empty(0, np.int64), lattice_index=lattice, lattice_origin=origin,
                 lattice_shape=(ny, nx), _index_map=index_map)

    # a 1-D point row has no stencil along its degenerate axis
    axes = [axis for axis, extent in ((0, nx), (1, ny)) if extent > 1]
    ring1 = [probe.neighbor(axis, s) for axis in axes for s in (-1, 1)]
    ring2 = [probe.neighbor(axis, s) for axis in axes for s in (-2, 2)]
    # closure: a point without its full 5-point stencil is boundary
    if axes:
        missing = np.any(np.stack(ring1) < 0, axis=0)
        has_ring2 = np.all(np.stack(ring1 + ring2) >= 0, axis=0)
    else:
        missing = np.zeros(len(points), dtype=bool)
        has_ring2 = np.zeros(len(points), dtype=bool)
    is_boundary = on_edge | missing

    all_idx = np.arange(len(points), dtype=np.int64)
    boundary_idx = all_idx[is_boundary]
    interior_idx = all_idx[~is_boundary]
    sensor_idx = all_idx[~is_boundary & has_ring2]
    return Grid(points=_frozen(points), h=float(h), boundary_idx=_frozen(boundary_idx),
                interior_idx=_frozen(interior_idx), sensor_idx=_frozen(sensor_idx),
                lattice_index=_frozen(lattice), lattice_origin=origin, lattice_shape=(ny, nx),
                domain=domain, resolution=resolution, _index_map=_frozen(index_map))


def build_grid(domain, resolution: int) -> Grid:
    """Masked Cartesian lattice over `domain` with spacing 1/(resolution - 1)"""
    domain = parse_domain(domain)
    if int(resolution) != resolution or resolution < MIN_RESOLUTION:
        raise GridError(f"resolution must be an integer >= {MIN_RESOLUTION}, got {resolution}")
    resolution = int(resolution)
    h = 1.0 / (resolution - 1)
    tol = EDGE_TOL * h

    xmin, ymin, xmax, ymax = domain.bounding_box()
    nx = int(math.floor((xmax - xmin) / h + 1e-9)) + 1
    ny = int(math.floor((ymax - ymin) / h + 1e-9)) + 1
    if isinstance(domain, RectangleSpec):
        for extent in (xmax - xmin, ymax - ymin):
            if abs(extent / h - round(extent / h)) > 1e-9:
                logger.warning(f"Rectangle extent {extent} is not a multiple of h={h:.6g}; far edge snapped to lattice")
    iy, ix = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    ix, iy = ix.ravel(), iy.ravel()
    x = xmin + ix * h
    y = ymin + iy * h

    inside = domain.contains(x, y, tol)
    if inside.sum() < 1:
        raise GridError(f"No lattice point falls inside {domain!r} at resolution {resolution}")
    x, y, ix, iy = x[inside], y[inside], ix[inside], iy[inside]
    points = np.column_stack([x, y])
    lattice = np.column_stack([ix, iy]).astype(np.int64)
    on_edge = domain.on_boundary(x, y, h, tol)

    grid = _assemble(points, lattice, (float(xmin), float(ymin)), h, on_edge, domain, resolution)
    logger.info(f"Built {domain.shape} grid: {grid.n_points} points, {len(grid.boundary_idx)} boundary, "
                f"{len(grid.sensor_idx)} sensors, h={h:.6g}")
    return grid


class BoundaryConfig(BaseModel):
    """Config form of a Dirichlet boundary: a named preset or polynomial terms [i, j, coef]"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    preset: Optional[Literal["homogeneous", "square_heterogeneous"]] = None
    polynomial: Optional[List[Tuple[int, int, float]]] = None

    @model_validator(mode="after")
    def _one_of(self):
        if (self.preset is None) == (self.polynomial is None):
            raise ValueError("boundary needs exactly one of 'preset' or 'polynomial'")
        return self


def _square_heterogeneous(x: float, y: float) -> float:
    tol = 1e-9
    if abs(x) <= tol:
        return 200.0 * y * (1.0 - y)
    if abs(x - 1.0) <= tol:
        return 400.0 * y * (1.0 - y)
    if abs(y) <= tol:
        return 200.0 * x * (1.0 - x)
    if abs(y - 1.0) <= tol:
        return 400.0 * x * (1.0 - x)
    return float("nan")


@dataclass(frozen=True)
class BoundarySpec:
    """Prescribed temperature T̄(x, y) on the boundary"""
    value_fn: Callable[[float, float], float]
    config: BoundaryConfig

    @property
    def is_homogeneous(self) -> bool:
        return self.config.preset == "homogeneous"

    @classmethod
    def homogeneous(cls) -> "BoundarySpec":
        return cls(lambda x, y: 0.0, BoundaryConfig(preset="homogeneous"))

    @classmethod
    def from_config(cls, cfg) -> "BoundarySpec":
        if not isinstance(cfg, BoundaryConfig):
            cfg = BoundaryConfig.model_validate(cfg)
        if cfg.preset == "homogeneous":
            return cls.homogeneous()
        if cfg.preset == "square_heterogeneous":
            return cls(_square_heterogeneous, cfg)
        terms = list(cfg.polynomial)

        def poly(x: float, y: float) -> float:
            return float(sum(c * x ** i * y ** j for i, j, c in terms))

        return cls(poly, cfg)


def boundary_values(grid: Grid, spec: BoundarySpec) -> np.ndarray:
    """T̄ at grid.boundary_idx, in that order"""
    if spec.is_homogeneous:
        return np.zeros(len(grid.boundary_idx))
    pts = grid.points[grid.boundary_idx]
    values = np.array([spec.value_fn(float(x), float(y)) for x, y in pts], dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        x, y = pts[np.argmax(bad)]
        raise BoundaryError(f"Boundary value is not finite at point ({x:.6g}, {y:.6g})")
    return values
