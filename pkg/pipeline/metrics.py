"""
Scores for predicted temperature fields: R², normalized L2 and max error.

normalized_l2 carries a 1/N_p prefactor, N_p being the number of evaluated
points, so values are typically O(1e-6) for percent-level relative errors.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import MetricsError

logger = logging.getLogger(__name__)


@dataclass
class Metrics:
    r2: Optional[float]
    normalized_l2: Optional[float]
    max_abs_err: float

    def as_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def _pair(pred, actual):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise MetricsError(f"prediction has {pred.size} values, reference has {actual.size}")
    if pred.size == 0:
        raise MetricsError("cannot score empty vectors")
    return pred, actual


def r2_score(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    if pred.size < 2:
        raise MetricsError("R² needs at least two values")
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricsError("R² is undefined for a constant reference")
    return 1.0 - float(np.sum((pred - actual) ** 2)) / ss_tot


def normalized_l2(pred, actual, n_points: Optional[int] = None) -> float:
    pred, actual = _pair(pred, actual)
    norm = float(np.linalg.norm(actual))
    if norm == 0.0:
        raise MetricsError("normalized L2 is undefined for a zero reference")
    n_points = pred.size if n_points is None else int(n_points)
    return float(np.linalg.norm(pred - actual)) / norm / n_points


def relative_l2(pred, actual) -> float:
    """‖pred − actual‖ / ‖actual‖ without the 1/N_p prefactor"""
    pred, actual = _pair(pred, actual)
    norm = float(np.linalg.norm(actual))
    if norm == 0.0:
        raise MetricsError("relative L2 is undefined for a zero reference")
    return float(np.linalg.norm(pred - actual)) / norm


def _score(pred: np.ndarray, actual: np.ndarray) -> Metrics:
    nl2 = normalized_l2(pred, actual) if np.any(actual != 0) else None
    if nl2 is None:
        logger.warning("Reference field is identically zero; normalized L2 skipped")
    r2 = r2_score(pred, actual) if pred.size > 1 and np.ptp(actual) > 0 else None
    if r2 is None:
        logger.warning("Reference field is constant; R² skipped")
    return Metrics(r2=r2, normalized_l2=nl2, max_abs_err=float(np.max(np.abs(pred - actual))))


def evaluate(pred, actual, per_field: bool = False) -> Metrics:
    """Pooled metrics over all values, or the mean of per-row metrics when per_field is set.

    2-D inputs are (functions, points); N_p is always the number of points per field.
    """
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise MetricsError(f"prediction shape {pred.shape} != reference shape {actual.shape}")
    if pred.ndim == 1:
        return _score(pred, actual)
    if not per_field:
        pooled = _score(pred.ravel(), actual.ravel())
        # N_p counts points of one field, not pooled values
        if pooled.normalized_l2 is not None:
            pooled.normalized_l2 = normalized_l2(pred, actual, n_points=pred.shape[1])
        return pooled
    rows = [_score(p, a) for p, a in zip(pred, actual)]
    nl2 = [m.normalized_l2 for m in rows if m.normalized_l2 is not None]
    r2 = [m.r2 for m in rows if m.r2 is not None]
    return Metrics(r2=float(np.mean(r2)) if r2 else None,
                   normalized_l2=float(np.mean(nl2)) if nl2 else None,
                   max_abs_err=float(max(m.max_abs_err for m in rows)))


def metrics_table(results: Dict[str, Metrics], reference_r2: Optional[Dict[str, float]] = None) -> pd.DataFrame:
    """One row per named result, with the published R² alongside when known"""
    df = pd.DataFrame.from_dict({name: m.as_dict() for name, m in results.items()}, orient="index")
    if reference_r2:
        df["reference_r2"] = pd.Series(reference_r2)
    df.index.name = "case"
    return df


def quantile_summary(values: Sequence[float], name: str) -> pd.DataFrame:
    return pd.Series(list(values), name=name, dtype=np.float64).describe(percentiles=[0.05, 0.5, 0.95]).to_frame()
