#!/usr/bin/env python3
"""
Run configuration, presets, command implementations and the heat_operator.py entry point
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import pytest

import heat_operator
from pipeline.commands import cmd_plot, cmd_solve, grid_from_meta, verify_dataset
from pipeline.config import PRESETS, RunConfig, deep_merge, load_config
from pipeline.dataset import FieldSample, assemble
from pipeline.domain import BoundarySpec, build_grid
from pipeline.errors import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_STORAGE, ConfigError, DatasetFormatError, StorageError
from pipeline.fd_source import AffineConductivity, ConstantConductivity, SourceField
from pipeline.gpr import TemperatureField
from pipeline.manufactured import manufactured_pair
from pipeline.metrics import evaluate
from pipeline.oracle import SolveConfig, solve_poisson
from pipeline.plots import export_field_csv, heatmap_figure, read_field_csv, triptych_figure, write_figure

SQUARE = {"shape": "rectangle", "x_range": [0.0, 1.0], "y_range": [0.0, 1.0]}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("HEATOP_WORKERS", raising=False)
    monkeypatch.delenv("HEATOP_OUTPUT_DIR", raising=False)


@pytest.fixture
def tiny_config(tmp_path):
    data = {
        "name": "tiny",
        "domain": SQUARE,
        "resolution": 13,
        "gpr": {"groups": [{"kernel": {"l": 0.3, "sigma": 50.0}, "count": 6}]},
        "network": {"branch_hidden": [], "trunk_hidden": [16, 16], "latent_dim": 8},
        "train": {"epochs": 2, "batch_size": 64, "lr_schedule": {"kind": "piecewise", "boundaries": [[0, 1e-3]]}},
        "output_dir": str(tmp_path / "artifacts"),
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(data))
    return path


# --- configuration ---------------------------------------------------------

@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate(name):
    cfg = load_config(preset=name)
    assert cfg.name == name
    assert cfg.run_dir == Path("artifacts") / name


def test_preset_hyperparameters():
    sq = load_config(preset="square-homogeneous")
    assert sq.resolution == 41
    assert sq.gpr.groups[0].kernel.l == 0.3 and sq.gpr.groups[0].kernel.sigma == 50.0
    assert sq.gpr.groups[0].count == 200
    assert sq.network.branch_hidden == [] and sq.network.trunk_hidden == [150] * 4 and sq.network.latent_dim == 200
    assert (sq.train.epochs, sq.train.batch_size) == (200, 160)
    assert sq.train.lr_schedule.rate(1000, 0) == pytest.approx(9.6e-5)
    assert sq.benchmark.reference_r2 == {"q1": 0.99934, "q2": 0.9989, "q3": 0.997918}

    het = load_config(preset="square-heterogeneous")
    assert (het.gpr.lift.l, het.gpr.lift.sigma) == (4.0, 20.0)
    assert het.gpr.groups[0].kernel.sigma == 40.0 and het.gpr.groups[0].count == 200

    vk = load_config(preset="variable-k")
    assert isinstance(vk.conductivity, AffineConductivity)
    assert [(g.kernel.sigma, g.count) for g in vk.gpr.groups] == [(50.0, 800), (80.0, 200)]
    assert vk.network.branch_hidden == [300, 300] and vk.network.latent_dim == 350
    assert vk.train.lr_schedule.rate(0, 9) == 1e-3 and vk.train.lr_schedule.rate(0, 10) == 1e-4

    ann = load_config(preset="annulus")
    assert (ann.benchmark.b, ann.benchmark.c_test) == (12000.0, 30000.0)
    assert ann.domain.shape == "annulus"
    assert load_config(preset="triangle").domain.shape == "triangle"


def test_default_and_unknown_presets():
    assert load_config().name == "square-homogeneous"
    with pytest.raises(ConfigError, match="Unknown preset"):
        load_config(preset="hexagon")


def test_file_overlays_preset(tmp_path):
    path = tmp_path / "overlay.json"
    path.write_text(json.dumps({"resolution": 21, "train": {"epochs": 5}}))
    cfg = load_config(path, preset="square-homogeneous")
    assert cfg.resolution == 21
    assert cfg.train.epochs == 5
    assert cfg.train.batch_size == 160


def test_switching_a_variant_replaces_it_whole(tmp_path):
    path = tmp_path / "overlay.json"
    path.write_text(json.dumps({"conductivity": {"kind": "constant"}, "boundary": {"polynomial": [[0, 0, 1.0]]}}))
    cfg = load_config(path, preset="variable-k")
    assert cfg.conductivity == ConstantConductivity()
    assert cfg.boundary.preset is None and cfg.boundary.polynomial == [(0, 0, 1.0)]


def test_deep_merge_does_not_mutate_inputs():
    base = {"a": {"b": 1, "c": [1, 2]}}
    out = deep_merge(base, {"a": {"c": [3]}})
    assert out == {"a": {"b": 1, "c": [3]}}
    assert base == {"a": {"b": 1, "c": [1, 2]}}


def test_seed_override_reaches_every_seed():
    cfg = load_config(preset="square-homogeneous", seed=7)
    assert (cfg.seed, cfg.split.seed, cfg.train.seed) == (7, 7, 7)


def test_environment_overrides(monkeypatch, tmp_path):
    monkeypatch.setenv("HEATOP_WORKERS", "3")
    monkeypatch.setenv("HEATOP_OUTPUT_DIR", str(tmp_path))
    cfg = load_config(preset="triangle")
    assert cfg.workers == 3
    assert cfg.run_dir == tmp_path / "triangle"
    assert load_config(preset="triangle", use_env=False).workers == 1

    monkeypatch.setenv("HEATOP_WORKERS", "many")
    with pytest.raises(ConfigError, match="HEATOP_WORKERS"):
        load_config(preset="triangle")


def test_invalid_config_files(tmp_path):
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"resolution": 21, "colour": "blue"}))
    with pytest.raises(ConfigError, match="Invalid configuration"):
        load_config(unknown, preset="square-homogeneous")

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(broken)

    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(listed)

    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.json")


def test_repository_config_file_validates():
    cfg = load_config(Path(__file__).parent / "config.json", use_env=False)
    assert isinstance(cfg, RunConfig)
    assert cfg.name == "square-homogeneous"
    assert cfg.gpr.sampler == "pathwise"


# --- commands ----------------------------------------------------------------

def test_cmd_solve_manufactured(tiny_config, tmp_path):
    cfg = load_config(tiny_config)
    result = cmd_solve(cfg, "product_sine", out=tmp_path / "sine.csv")
    assert result.relative_l2 is not None and result.relative_l2 <= 0.01
    df = read_field_csv(result.path)
    assert len(df) == build_grid(SQUARE, 13).n_points
    assert np.array_equal(df["value"].to_numpy(), result.values)


def test_cmd_solve_benchmark_has_no_analytic_reference(tiny_config):
    cfg = load_config(tiny_config)
    result = cmd_solve(cfg, "benchmark", which="q2")
    assert result.relative_l2 is None
    assert result.path == cfg.run_dir / "solve" / "benchmark-q2.csv"
    assert result.path.exists()


def test_zero_source_scores_skip_normalized_l2():
    grid = build_grid(SQUARE, 21)
    T = solve_poisson(grid, lambda x, y: np.zeros_like(x), BoundarySpec.homogeneous())
    assert np.all(T.values == 0.0)
    m = evaluate(np.full(grid.n_points, 0.01), T.values)
    assert m.normalized_l2 is None and m.r2 is None
    assert m.max_abs_err == pytest.approx(0.01)


def _bump_dataset(corrupt: float = 1.0):
    grid = build_grid(SQUARE, 41)
    pair = manufactured_pair("quadratic_bump")
    T = TemperatureField(pair.T(grid.points[:, 0], grid.points[:, 1]), "analytic")
    q = SourceField.from_function(pair.q, grid)
    samples = [FieldSample(T, q), FieldSample(T, SourceField(corrupt * q.values, grid))]
    return grid, assemble(samples, grid, boundary={"preset": "homogeneous"})


def test_verify_flags_corrupted_pairs():
    grid, ds = _bump_dataset(corrupt=2.0)
    result = verify_dataset(ds, grid, SolveConfig(margin_fill="linear"))
    errors = result.table["relative_l2"].to_numpy()
    assert errors[0] <= 1e-3
    assert errors[1] == pytest.approx(1.0, abs=0.01)
    assert list(result.table["flagged"]) == [False, True]
    assert result.flagged == 1
    assert "50%" in result.summary.index


def test_grid_from_meta():
    grid, ds = _bump_dataset()
    rebuilt = grid_from_meta(ds)
    assert np.array_equal(rebuilt.points, grid.points)
    assert np.array_equal(rebuilt.sensor_idx, grid.sensor_idx)

    off_grid = assemble([FieldSample(TemperatureField(np.zeros(grid.n_points), "analytic"),
                                     SourceField(np.zeros(len(grid.sensor_idx)), grid))], grid, output_idx=[0, 1])
    with pytest.raises(DatasetFormatError):
        grid_from_meta(off_grid)


# --- field export ----------------------------------------------------------

def test_field_csv_round_trip(tmp_path):
    grid = build_grid(SQUARE, 9)
    values = np.random.default_rng(0).normal(size=grid.n_points) / 3.0
    path = export_field_csv(grid.points, values, tmp_path / "f.csv")
    df = read_field_csv(path)
    assert len(df) == grid.n_points
    assert list(df.columns) == ["x", "y", "value"]
    assert np.array_equal(df["value"].to_numpy(), values)


def test_read_field_csv_errors(tmp_path):
    with pytest.raises(StorageError, match="not found"):
        read_field_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    pd.DataFrame({"x": [0.0], "T": [1.0]}).to_csv(bad, index=False)
    with pytest.raises(StorageError, match="lacks"):
        read_field_csv(bad)


def test_constant_field_heatmap_names_the_constant():
    df = pd.DataFrame({"x": [0.0, 1.0, 0.0, 1.0], "y": [0.0, 0.0, 1.0, 1.0], "value": [5.0] * 4})
    fig = heatmap_figure(df, "flat")
    assert "constant value 5" in fig.layout.title.text
    assert np.all(np.asarray(fig.data[0].z) == 5.0)


def test_triptych_layout():
    grid = build_grid(SQUARE, 9)
    x, y = grid.points[:, 0], grid.points[:, 1]
    pred = pd.DataFrame({"x": x, "y": y, "value": x + y})
    ref = pd.DataFrame({"x": x, "y": y, "value": x + y + 0.1})
    fig = triptych_figure(pred, ref)
    assert len(fig.data) == 3
    assert [t.coloraxis for t in fig.data] == ["coloraxis", "coloraxis", "coloraxis2"]
    diff = np.asarray(fig.data[2].z, dtype=float)
    assert np.allclose(diff[np.isfinite(diff)], -0.1)


def test_write_figure_falls_back_to_html(monkeypatch, tmp_path):
    def no_engine(self, *args, **kwargs):
        raise ValueError("static image export needs kaleido")

    monkeypatch.setattr(go.Figure, "write_image", no_engine)
    out = write_figure(go.Figure(), tmp_path / "fig")
    assert out.suffix == ".html"
    assert out.exists()


def test_cmd_plot_writes_one_figure_per_field(monkeypatch, tmp_path):
    def fake_svg(self, path, format=None, **kwargs):
        Path(path).write_text("<svg/>")

    monkeypatch.setattr(go.Figure, "write_image", fake_svg)
    grid = build_grid(SQUARE, 9)
    a = export_field_csv(grid.points, grid.points[:, 0], tmp_path / "a.csv")
    b = export_field_csv(grid.points, grid.points[:, 1], tmp_path / "b.csv")
    written = cmd_plot([a, b], tmp_path / "plots")
    assert [p.name for p in written] == ["a.svg", "b.svg"]
    written = cmd_plot([a, b], tmp_path / "plots", triptych=True)
    assert [p.name for p in written] == ["a_vs_b.svg"]
    with pytest.raises(ConfigError):
        cmd_plot([], tmp_path)


# --- entry point -----------------------------------------------------------

def test_main_without_command_shows_help():
    assert heat_operator.main([]) == EXIT_CONFIG


def test_main_rejects_unknown_preset():
    with pytest.raises(SystemExit):
        heat_operator.main(["--preset", "hexagon", "solve"])


def test_main_maps_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"resolution": 3}))
    assert heat_operator.main(["--preset", "square-homogeneous", "--config", str(bad), "solve"]) == EXIT_CONFIG


def test_main_maps_storage_errors(tmp_path):
    assert heat_operator.main(["plot", str(tmp_path / "missing.csv")]) == EXIT_STORAGE


def test_main_solve_and_verify(tiny_config, tmp_path, capsys):
    out = tmp_path / "q1.csv"
    assert heat_operator.main(["--config", str(tiny_config), "solve", "--which", "q1", "--out", str(out)]) == EXIT_OK
    assert len(read_field_csv(out)) == 13 * 13

    dataset = tmp_path / "ds"
    assert heat_operator.main(["--config", str(tiny_config), "generate", "--out", str(dataset)]) == EXIT_OK
    assert (dataset / "manifest.json").exists()
    assert (tmp_path / "generation_report.json").exists()

    assert heat_operator.main(["verify", "--dataset", str(dataset), "--threshold", "10"]) == EXIT_OK
    assert (tmp_path / "verify" / "verify_pairs.csv").exists()
    assert heat_operator.main(["verify", "--dataset", str(dataset), "--threshold", "1e-12"]) == EXIT_NUMERIC
    assert "Median relative L2" in capsys.readouterr().out


def test_eval_accepts_a_group():
    args = heat_operator.build_parser().parse_args(["eval", "--group", "1"])
    assert args.group == 1
    assert heat_operator.build_parser().parse_args(["eval"]).group is None
