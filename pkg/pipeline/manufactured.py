"""
Closed-form (T, q) pairs for k = 1 and the three benchmark heat sources used
to probe trained models.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .domain import BoundarySpec
from .errors import ConfigError

PAIR_NAMES = ("product_sine", "quadratic_bump", "benchmark")
BENCHMARKS = ("q1", "q2", "q3")


@dataclass(frozen=True)
class ManufacturedPair:
    name: str
    q: Callable[[np.ndarray, np.ndarray], np.ndarray]
    boundary: BoundarySpec
    # None when T has no closed form and must come from the oracle
    T: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


def benchmark_source(which: str, a: float = 2000.0, b: float = 3000.0, c_test: float = 3000.0):
    if which == "q1":
        return lambda x, y: np.full(np.shape(x), float(a))
    if which == "q2":
        return lambda x, y: b * np.sin(x) * np.sin(y)
    if which == "q3":
        return lambda x, y: c_test * (np.sin(5 * x) * np.sin(3 * y) + np.cos(5 * y) * np.cos(2 * x))
    raise ConfigError(f"Unknown benchmark source {which!r}; expected one of {BENCHMARKS}")


def manufactured_pair(name: str, which: Optional[str] = None, a: float = 2000.0, b: float = 3000.0,
                      c_test: float = 3000.0) -> ManufacturedPair:
    zero_bc = BoundarySpec.homogeneous()
    if name == "product_sine":
        return ManufacturedPair(
            name,
            q=lambda x, y: 2 * np.pi ** 2 * np.sin(np.pi * x) * np.sin(np.pi * y),
            boundary=zero_bc,
            T=lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y),
        )
    if name == "quadratic_bump":
        return ManufacturedPair(
            name,
            q=lambda x, y: 2 * (x * (1 - x) + y * (1 - y)),
            boundary=zero_bc,
            T=lambda x, y: x * (1 - x) * y * (1 - y),
        )
    if name == "benchmark":
        return ManufacturedPair(f"benchmark-{which}", q=benchmark_source(which or "q1", a, b, c_test), boundary=zero_bc)
    raise ConfigError(f"Unknown manufactured pair {name!r}; expected one of {PAIR_NAMES}")
