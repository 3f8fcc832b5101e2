"""
Field export: (x, y, value) CSV tables and static heatmaps.

Heatmaps are written as SVG through plotly's static image engine (kaleido);
when that engine is unavailable a self-contained HTML file is written instead.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from .errors import ShapeError, StorageError

logger = logging.getLogger(__name__)

FIELD_COLUMNS = ["x", "y", "value"]


def field_frame(coords, values) -> pd.DataFrame:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(coords) != len(values):
        raise ShapeError(f"{len(coords)} coordinates but {len(values)} values")
    return pd.DataFrame({"x": coords[:, 0], "y": coords[:, 1], "value": values})


def export_field_csv(coords, values, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        # repr-precision floats so a re-read field is bit-identical
        field_frame(coords, values).to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise StorageError(f"could not write {path}: {e}") from e
    return path


def read_field_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"field file not found: {path}")
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise StorageError(f"unreadable field file {path}: {e}") from e
    missing = [c for c in FIELD_COLUMNS if c not in df.columns]
    if missing:
        raise StorageError(f"{path} lacks column(s) {missing}; expected {FIELD_COLUMNS}")
    return df[FIELD_COLUMNS]


def _grid_of(df: pd.DataFrame) -> pd.DataFrame:
    """Values pivoted onto the (y, x) lattice; NaN outside the domain"""
    return df.pivot_table(index="y", columns="x", values="value", aggfunc="first")


def _heatmap(df: pd.DataFrame, **kwargs) -> go.Heatmap:
    lattice = _grid_of(df)
    return go.Heatmap(z=lattice.values, x=lattice.columns.values, y=lattice.index.values, **kwargs)


def _constant_note(df: pd.DataFrame) -> Optional[str]:
    v = df["value"].to_numpy()
    if len(v) and np.all(v == v[0]):
        return f"constant value {v[0]:.6g}"
    return None


def heatmap_figure(df: pd.DataFrame, title: str = "") -> go.Figure:
    note = _constant_note(df)
    fig = go.Figure(_heatmap(df, colorscale="Jet", colorbar={"title": "T"}))
    fig.update_layout(title=f"{title} ({note})" if note else title,
                      xaxis={"title": "x", "scaleanchor": "y"}, yaxis={"title": "y"},
                      width=520, height=480, template="plotly_white")
    return fig


def triptych_figure(prediction: pd.DataFrame, reference: pd.DataFrame,
                    titles: Sequence[str] = ("DeepONet", "Reference", "Difference")) -> go.Figure:
    """Prediction, reference and their difference; the first two panels share one color scale"""
    merged = prediction.merge(reference, on=["x", "y"], suffixes=("_pred", "_ref"))
    if len(merged) != len(reference) or len(merged) != len(prediction):
        raise ShapeError("prediction and reference fields are not on the same points")
    diff = merged.assign(value=merged["value_pred"] - merged["value_ref"])[FIELD_COLUMNS]

    fig = make_subplots(rows=1, cols=3, subplot_titles=list(titles), horizontal_spacing=0.08)
    fig.add_trace(_heatmap(prediction, coloraxis="coloraxis"), row=1, col=1)
    fig.add_trace(_heatmap(reference, coloraxis="coloraxis"), row=1, col=2)
    fig.add_trace(_heatmap(diff, coloraxis="coloraxis2"), row=1, col=3)
    fig.update_layout(
        coloraxis={"colorscale": "Jet", "colorbar": {"title": "T", "x": 0.63}},
        coloraxis2={"colorscale": "RdBu", "colorbar": {"title": "ΔT", "x": 1.0}},
        width=1500, height=480, template="plotly_white",
    )
    return fig


def write_figure(fig: go.Figure, stem) -> Path:
    """Write `stem`.svg, or `stem`.html when static export is unavailable"""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    svg = stem.with_suffix(".svg")
    try:
        fig.write_image(str(svg), format="svg")
        return svg
    except (ValueError, ImportError, RuntimeError) as e:
        html = stem.with_suffix(".html")
        logger.warning(f"SVG export unavailable ({e}); writing {html.name} instead")
        try:
            fig.write_html(str(html), include_plotlyjs=True, full_html=True)
        except OSError as err:
            raise StorageError(f"could not write {html}: {err}") from err
        return html


def plot_fields(files: Sequence, out_dir, triptych: bool = False) -> List[Path]:
    """One heatmap per CSV field file, or a triptych from (prediction, reference)"""
    out_dir = Path(out_dir)
    frames = [read_field_csv(f) for f in files]
    if triptych:
        if len(frames) != 2:
            raise ShapeError(f"a triptych needs exactly two fields (prediction, reference), got {len(frames)}")
        stem = out_dir / f"{Path(files[0]).stem}_vs_{Path(files[1]).stem}"
        return [write_figure(triptych_figure(frames[0], frames[1]), stem)]
    return [write_figure(heatmap_figure(df, Path(f).stem), out_dir / Path(f).stem) for f, df in zip(files, frames)]
