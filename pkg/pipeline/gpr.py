"""
Random temperature fields from a Gaussian random field prior and from the
Gaussian-process posterior conditioned on Dirichlet boundary data.

Prior mean is zero and the kernel is the RBF kernel
    k(xi, xj) = sigma^2 * exp(-|xi - xj|^2 / (2 l^2)).

Two posterior samplers are provided:

* `sample_posterior` factorizes the full posterior covariance K* (reference).
* `PathwiseSampler` draws a prior field on the bounding lattice through the
  Kronecker structure of the separable RBF kernel and corrects it with the
  boundary system. It samples the same N(mu*, K*) while only the n0 x n0
  boundary system and two 1-D axis matrices are ever factorized.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .domain import Grid
from .errors import FactorizationError, NumericError, ShapeError

logger = logging.getLogger(__name__)


class KernelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    l: float = Field(gt=0)
    sigma: float = Field(gt=0)


class NoiseConfig(BaseModel):
    """Observation noise and the diagonal regularizer used for factorization.

    `jitter` and `max_jitter` are relative to sigma^2 of the kernel being factorized;
    jitter escalates x10 per failed attempt up to `max_jitter`.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    sigma_eps_sq: float = Field(1e-3, ge=0)
    jitter: float = Field(1e-8, gt=0)
    max_jitter: float = Field(1e-4, gt=0)


Provenance = Literal["prior", "posterior", "composed", "analytic", "oracle", "prediction"]


@dataclass
class TemperatureField:
    values: np.ndarray
    provenance: Provenance
    seed: Optional[int] = None
    stream: Optional[int] = None
    # absolute diagonal regularizer that entered the sample
    jitter: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"{self.provenance} temperature field contains non-finite values")


@dataclass
class GPRPosterior:
    mean: np.ndarray
    cov: np.ndarray
    sigma: float
    noise: NoiseConfig
    jitter: float = 0.0


_monitors: List[List[int]] = []


@contextmanager
def track_factorizations() -> Iterator[List[int]]:
    """Collect the dimension of every Cholesky factorization made inside the block"""
    sizes: List[int] = []
    _monitors.append(sizes)
    try:
        yield sizes
    finally:
        _monitors.remove(sizes)


def _cholesky(mat: np.ndarray, scale: float, noise: NoiseConfig, what: str) -> Tuple[np.ndarray, float]:
    n = mat.shape[0]
    for sizes in _monitors:
        sizes.append(n)
    rel = noise.jitter
    eye = np.eye(n)
    while True:
        jitter = rel * scale
        try:
            factor = cholesky(mat + jitter * eye, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            if rel * 10 > noise.max_jitter * (1 + 1e-9):
                raise FactorizationError(
                    f"{what}: {n}x{n} matrix is not positive definite even with jitter {jitter:.3g} "
                    f"(min diagonal {float(np.min(np.diag(mat))):.3g}, max {float(np.max(np.diag(mat))):.3g})"
                ) from None
            rel *= 10
            continue
        if rel > noise.jitter:
            logger.warning(f"{what}: jitter escalated to {jitter:.3g} for {n}x{n} factorization")
        return factor, jitter


def _streams(seed: int, count: int) -> List[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(count)]


def _map(fn, count: int, workers: int) -> list:
    if workers <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def rbf_kernel(xi: Sequence[float], xj: Sequence[float], cfg: KernelConfig) -> float:
    d2 = (xi[0] - xj[0]) ** 2 + (xi[1] - xj[1]) ** 2
    return cfg.sigma ** 2 * math.exp(-d2 / (2.0 * cfg.l ** 2))


def build_cov(points_a, points_b, cfg: KernelConfig) -> np.ndarray:
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ShapeError("build_cov needs nonempty point lists")
    d2 = cdist(a, b, "sqeuclidean")
    return cfg.sigma ** 2 * np.exp(-d2 / (2.0 * cfg.l ** 2))


def sample_prior(grid: Grid, cfg: KernelConfig, seed: int, count: int,
                 noise: Optional[NoiseConfig] = None, workers: int = 1) -> List[TemperatureField]:
    if count < 1:
        raise ShapeError(f"count must be >= 1, got {count}")
    noise = noise or NoiseConfig()
    K = build_cov(grid.points, grid.points, cfg)
    L, jitter = _cholesky(K, cfg.sigma ** 2, noise, "prior covariance")
    rngs = _streams(seed, count)

    def draw(i: int) -> TemperatureField:
        z = rngs[i].standard_normal(grid.n_points)
        return TemperatureField(L @ z, "prior", seed=seed, stream=i, jitter=jitter)

    return _map(draw, count, workers)


def _boundary_system(grid: Grid, cfg: KernelConfig, tbar: np.ndarray, noise: NoiseConfig):
    tbar = np.asarray(tbar, dtype=np.float64)
    if tbar.shape != (len(grid.boundary_idx),):
        raise ShapeError(f"boundary data has shape {tbar.shape}, grid has {len(grid.boundary_idx)} boundary points")
    xb = grid.points[grid.boundary_idx]
    kbb = build_cov(xb, xb, cfg) + noise.sigma_eps_sq * np.eye(len(xb))
    lb, jitter = _cholesky(kbb, cfg.sigma ** 2, noise, "boundary system")
    kxb = build_cov(grid.points, xb, cfg)
    return tbar, lb, kxb, jitter


def condition_on_boundary(grid: Grid, cfg: KernelConfig, tbar, noise: Optional[NoiseConfig] = None) -> GPRPosterior:
    """Posterior mean and covariance over all grid points given boundary data"""
    noise = noise or NoiseConfig()
    tbar, lb, kxb, jitter = _boundary_system(grid, cfg, tbar, noise)
    mean = kxb @ cho_solve((lb, True), tbar)
    v = solve_triangular(lb, kxb.T, lower=True, check_finite=False)
    cov = build_cov(grid.points, grid.points, cfg) - v.T @ v
    cov = 0.5 * (cov + cov.T)
    logger.info(f"Conditioned on {len(tbar)} boundary points (l={cfg.l}, sigma={cfg.sigma})")
    return GPRPosterior(mean=mean, cov=cov, sigma=cfg.sigma, noise=noise, jitter=jitter)


def sample_posterior(post: GPRPosterior, seed: int, count: int, workers: int = 1) -> List[TemperatureField]:
    if count < 1:
        raise ShapeError(f"count must be >= 1, got {count}")
    L, jitter = _cholesky(post.cov, post.sigma ** 2, post.noise, "posterior covariance")
    rngs = _streams(seed, count)

    def draw(i: int) -> TemperatureField:
        z = rngs[i].standard_normal(len(post.mean))
        return TemperatureField(post.mean + L @ z, "posterior", seed=seed, stream=i, jitter=jitter)

    return _map(draw, count, workers)


class PathwiseSampler:
    """Posterior sampler that never factorizes a matrix larger than the boundary system"""

    def __init__(self, grid: Grid, cfg: KernelConfig, tbar, noise: Optional[NoiseConfig] = None):
        self.grid = grid
        self.cfg = cfg
        self.noise = noise or NoiseConfig()
        self.tbar, self._lb, self._kxb, jitter_b = _boundary_system(grid, cfg, tbar, self.noise)
        unit = KernelConfig(l=cfg.l, sigma=1.0)
        xs, ys = grid.lattice_axes()
        self._lx, jx = _cholesky(_axis_gram(xs, unit), 1.0, self.noise, "x-axis prior")
        self._ly, jy = _cholesky(_axis_gram(ys, unit), 1.0, self.noise, "y-axis prior")
        self.jitter = jitter_b + cfg.sigma ** 2 * (jx + jy + jx * jy)
        ix, iy = grid.lattice_index[:, 0], grid.lattice_index[:, 1]
        self._gather = (iy, ix)

    def _draw(self, rng: np.random.Generator) -> np.ndarray:
        ny, nx = self.grid.lattice_shape
        z = rng.standard_normal((ny, nx))
        prior = (self.cfg.sigma * (self._ly @ z @ self._lx.T))[self._gather]
        eps = math.sqrt(self.noise.sigma_eps_sq) * rng.standard_normal(len(self.tbar))
        resid = self.tbar - prior[self.grid.boundary_idx] - eps
        return prior + self._kxb @ cho_solve((self._lb, True), resid)

    def sample(self, seed: int, count: int, workers: int = 1) -> List[TemperatureField]:
        if count < 1:
            raise ShapeError(f"count must be >= 1, got {count}")
        rngs = _streams(seed, count)

        def draw(i: int) -> TemperatureField:
            return TemperatureField(self._draw(rngs[i]), "posterior", seed=seed, stream=i, jitter=self.jitter)

        return _map(draw, count, workers)


def _axis_gram(coords: np.ndarray, unit: KernelConfig) -> np.ndarray:
    d = coords[:, None] - coords[None, :]
    return np.exp(-d ** 2 / (2.0 * unit.l ** 2))


def compose_heterogeneous(hetero: TemperatureField, homos: Sequence[TemperatureField]) -> List[TemperatureField]:
    """Add one large-scale field matching the boundary data to each homogeneous field"""
    out = []
    for i, homo in enumerate(homos):
        if homo.values.shape != hetero.values.shape:
            raise ShapeError(f"field {i} has {homo.values.shape[0]} values, lifting field has {hetero.values.shape[0]}")
        out.append(TemperatureField(hetero.values + homo.values, "composed", seed=homo.seed,
                                    stream=homo.stream, jitter=hetero.jitter + homo.jitter))
    return out
