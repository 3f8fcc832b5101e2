#!/usr/bin/env python3
"""
NumPy DeepONet: forward pass, gradients, optimizer, training loop and model files
"""

import numpy as np
import pytest
from pydantic import ValidationError

from pipeline.dataset import DatasetMeta, NormalizationSpec, OperatorDataset
from pipeline.deeponet import (Adam, Batch, ExponentialSchedule, MLPSpec, NetworkConfig, PiecewiseSchedule,
                               TrainConfig, backward, batch_loss, forward, forward_batch, init_model, load_model,
                               loss_mse, predict_field, predict_values, save_model, train)
from pipeline.domain import build_grid
from pipeline.errors import ConfigError, ModelFormatError, ShapeError, TrainingDiverged
from pipeline.fd_source import SourceField

SQUARE = {"shape": "rectangle", "x_range": [0.0, 1.0], "y_range": [0.0, 1.0]}


def _tiny_model(seed=0, m=3, branch=(5,), c=4, trunk=(6, 6)):
    return init_model(MLPSpec(input_dim=m, hidden_layers=list(branch), output_dim=c),
                      MLPSpec(input_dim=2, hidden_layers=list(trunk), output_dim=c), seed)


def _dataset(u, coords, values, normalization=None):
    n, m = u.shape
    meta = DatasetMeta(n=n, m=m, p=len(coords), output_on_grid=False, groups=[0] * n, function_ids=list(range(n)),
                       normalization=normalization or NormalizationSpec())
    sensors = np.column_stack([np.linspace(0.2, 0.8, m), np.full(m, 0.5)])
    return OperatorDataset(branch_inputs=u, sensor_coords=sensors, output_coords=coords,
                           output_values=values, meta=meta)


def _toy_data(seed=0, n=6, m=3, p=5):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, m))
    coords = rng.uniform(size=(p, 2))
    values = np.sin(u.sum(axis=1))[:, None] * (coords[:, 0] + coords[:, 1])[None, :]
    return u, coords, values


def test_init_is_deterministic():
    a, b = _tiny_model(seed=3), _tiny_model(seed=3)
    for x, y in zip(a.parameters(), b.parameters()):
        assert np.array_equal(x, y)
    c = _tiny_model(seed=4)
    assert not np.array_equal(a.parameters()[0], c.parameters()[0])


def test_glorot_normal_variance():
    model = init_model(MLPSpec(input_dim=100, output_dim=200), MLPSpec(input_dim=2, output_dim=200), seed=0)
    W, b = model.branch[0]
    assert W.shape == (100, 200)
    assert abs(W.var() - 2.0 / 300) <= 0.2 * 2.0 / 300
    assert np.all(b == 0.0)


def test_zero_hidden_branch_is_affine():
    model = init_model(*NetworkConfig().specs(1369), seed=0)
    assert len(model.branch) == 1
    assert model.branch[0][0].shape == (1369, 200)
    assert [W.shape for W, _ in model.trunk] == [(2, 150), (150, 150), (150, 150), (150, 150), (150, 200)]
    assert model.c == 200 and model.m == 1369


def test_incompatible_latent_sizes():
    with pytest.raises(ConfigError):
        init_model(MLPSpec(input_dim=3, output_dim=4), MLPSpec(input_dim=2, output_dim=5), seed=0)
    with pytest.raises(ValidationError):
        MLPSpec(input_dim=0, output_dim=4)
    with pytest.raises(ValidationError):
        MLPSpec(input_dim=3, hidden_layers=[4, 0], output_dim=4)


def _set_biases(model, f, g):
    for layers, out in ((model.branch, f), (model.trunk, g)):
        for W, b in layers:
            W[...] = 0.0
            b[...] = 0.0
        layers[-1][1][...] = out


def test_parameter_surgery_forward():
    model = init_model(MLPSpec(input_dim=2, output_dim=2), MLPSpec(input_dim=2, hidden_layers=[3], output_dim=2), 0)
    _set_biases(model, [1.0, 0.0], [0.0, 1.0])
    assert forward(model, [0.3, -1.2], (0.5, 0.5)) == 0.0

    model = init_model(MLPSpec(input_dim=2, output_dim=1), MLPSpec(input_dim=2, output_dim=1), 0)
    _set_biases(model, [2.0], [3.0])
    assert forward(model, [0.3, -1.2], (0.1, 0.9)) == 6.0


def test_batched_forward_matches_scalar_forward():
    model = _tiny_model(seed=1)
    rng = np.random.default_rng(0)
    u = rng.normal(size=(3, 3))
    coords = rng.uniform(size=(7, 2))
    batched = forward_batch(model, u, coords)
    assert batched.shape == (3, 7)
    for i in range(3):
        for j in range(7):
            scalar = forward(model, u[i], coords[j])
            assert abs(batched[i, j] - scalar) <= 1e-12 * max(1.0, abs(scalar))


def test_forward_shape_checks():
    model = _tiny_model()
    with pytest.raises(ShapeError):
        forward(model, [1.0, 2.0], (0.0, 0.0))
    with pytest.raises(ShapeError):
        forward_batch(model, np.zeros((2, 3)), np.zeros((4, 3)))


def test_loss_mse():
    assert loss_mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert loss_mse(np.arange(4.0) + 1.0, np.arange(4.0)) == 1.0
    assert loss_mse([0.0, 2.0], [1.0, 1.0]) == 1.0
    with pytest.raises(ShapeError):
        loss_mse([], [])
    with pytest.raises(ShapeError):
        loss_mse([1.0], [1.0, 2.0])


def _batches(rng):
    u = rng.normal(size=(4, 3))
    y = rng.uniform(size=(5, 2))
    full = Batch(u=u, y=y, target=rng.normal(size=(4, 5)))
    rows = np.array([0, 1, 1, 3, 2, 0, 3])
    cols = np.array([4, 0, 2, 2, 1, 3, 0])
    pairs = Batch(u=u, y=y, target=rng.normal(size=7), pairs=(rows, cols))
    return full, pairs


@pytest.mark.parametrize("mode", ["full", "pairs"])
def test_gradients_match_finite_differences(mode):
    """Every one of the >= 100 parameters, central differences with step 1e-6"""
    model = _tiny_model(seed=2)
    assert model.n_parameters() >= 100
    batch = dict(zip(("full", "pairs"), _batches(np.random.default_rng(8))))[mode]
    _, grads = backward(model, batch)
    params = model.parameters()
    assert [g.shape for g in grads] == [p.shape for p in params]

    step = 1e-6
    for p, g in zip(params, grads):
        for j in range(p.size):
            old = p.flat[j]
            p.flat[j] = old + step
            up = batch_loss(model, batch)
            p.flat[j] = old - step
            down = batch_loss(model, batch)
            p.flat[j] = old
            fd = (up - down) / (2 * step)
            assert abs(g.flat[j] - fd) <= 1e-5 * max(abs(g.flat[j]), abs(fd)) + 1e-7


def test_zero_residual_gives_zero_gradients():
    model = _tiny_model(seed=5)
    rng = np.random.default_rng(1)
    u, y = rng.normal(size=(4, 3)), rng.uniform(size=(5, 2))
    loss, grads = backward(model, Batch(u=u, y=y, target=forward_batch(model, u, y)))
    assert loss == 0.0
    assert all(np.all(g == 0.0) for g in grads)


def test_duplicated_batch_leaves_gradients_unchanged():
    model = _tiny_model(seed=6)
    full, _ = _batches(np.random.default_rng(2))
    doubled = Batch(u=np.vstack([full.u, full.u]), y=full.y, target=np.vstack([full.target, full.target]))
    loss1, g1 = backward(model, full)
    loss2, g2 = backward(model, doubled)
    assert loss2 == pytest.approx(loss1, rel=1e-12)
    for a, b in zip(g1, g2):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-15)


def test_branch_input_scaling_identity():
    model = _tiny_model(seed=7)
    rng = np.random.default_rng(3)
    u, y = rng.normal(size=(4, 3)), rng.uniform(size=(6, 2))
    before = forward_batch(model, u, y)
    s = 250.0
    model.branch[0][0][...] /= s
    after = forward_batch(model, s * u, y)
    assert np.max(np.abs(after - before)) <= 1e-10 * np.max(np.abs(before))


def test_adam_first_step_moves_by_learning_rate():
    p = [np.array([1.0, -2.0, 0.5])]
    g = [np.array([0.3, -4.0, 1e-3])]
    Adam(p).step(p, g, lr=0.01)
    assert np.allclose(p[0], [0.99, -1.99, 0.49], atol=1e-6)


def test_exponential_schedule():
    sched = ExponentialSchedule()
    assert sched.rate(0, 0) == pytest.approx(1e-4)
    assert sched.rate(1000, 3) == pytest.approx(9.6e-5)
    assert sched.rate(500, 0) == pytest.approx(1e-4 * 0.96 ** 0.5)


def test_piecewise_schedule():
    sched = PiecewiseSchedule(boundaries=[(0, 1e-3), (10, 1e-4), (110, 5e-5)])
    assert sched.rate(0, 0) == 1e-3
    assert sched.rate(999, 9) == 1e-3
    assert sched.rate(0, 10) == 1e-4
    assert sched.rate(0, 150) == 5e-5
    with pytest.raises(ValidationError):
        PiecewiseSchedule(boundaries=[(5, 1e-3)])
    with pytest.raises(ValidationError):
        PiecewiseSchedule(boundaries=[(0, 1e-3), (0, 1e-4)])
    with pytest.raises(ValidationError):
        PiecewiseSchedule(boundaries=[(0, -1e-3)])


def test_train_config_picks_schedule_by_kind():
    cfg = TrainConfig.model_validate({"lr_schedule": {"kind": "piecewise", "boundaries": [[0, 1e-3]]}})
    assert isinstance(cfg.lr_schedule, PiecewiseSchedule)
    assert isinstance(TrainConfig().lr_schedule, ExponentialSchedule)
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)


def test_training_fits_zero_targets():
    rng = np.random.default_rng(0)
    u = 0.1 * rng.normal(size=(4, 3))
    coords = rng.uniform(size=(5, 2))
    ds = _dataset(u, coords, np.zeros((4, 5)))
    model = _tiny_model(seed=1, branch=(), trunk=(8,))
    cfg = TrainConfig(epochs=50, batch_size=2, seed=0,
                      lr_schedule=ExponentialSchedule(start=5e-3, decay_rate=0.1, decay_steps=500))
    _, report = train(model, ds, None, cfg)
    assert report.steps == 50 * 10
    assert len(report.epoch_losses) == 50
    assert report.final_loss <= 1e-6
    assert report.final_loss < report.initial_loss


@pytest.mark.parametrize("mode", ["triples", "functions"])
def test_training_reduces_loss_and_is_deterministic(mode):
    u, coords, values = _toy_data()
    ds = _dataset(u[:5], coords, values[:5])
    test_ds = _dataset(u[5:], coords, values[5:])
    model = _tiny_model(seed=0)
    start = [p.copy() for p in model.parameters()]
    cfg = TrainConfig(epochs=30, batch_size=4 if mode == "triples" else 2, batch_mode=mode, seed=1,
                      lr_schedule=PiecewiseSchedule(boundaries=[(0, 1e-2)]))
    a, rep_a = train(model, ds, test_ds, cfg)
    b, rep_b = train(model, ds, test_ds, cfg)

    assert rep_a.final_loss < rep_a.initial_loss
    assert rep_a.epoch_losses == rep_b.epoch_losses
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert all(np.array_equal(x, y) for x, y in zip(model.parameters(), start))
    assert rep_a.test_loss is not None and rep_a.test_r2 is not None
    assert all(np.isfinite(rep_a.epoch_losses)) and min(rep_a.epoch_losses) >= 0.0
    assert np.array_equal(a.sensor_coords, ds.sensor_coords)


def test_warm_start_resumes_from_final_loss(tmp_path):
    u, coords, values = _toy_data(n=5)
    ds = _dataset(u, coords, values)
    cfg = TrainConfig(epochs=5, batch_size=8, lr_schedule=PiecewiseSchedule(boundaries=[(0, 1e-3)]))
    first, rep1 = train(_tiny_model(seed=0), ds, None, cfg)
    resumed = load_model(save_model(first, tmp_path / "model"))
    _, rep2 = train(resumed, ds, None, cfg)
    assert abs(rep2.initial_loss - rep1.final_loss) <= 1e-10 * max(1.0, rep1.final_loss)


def test_reported_losses_are_full_batch_losses():
    u, coords, values = _toy_data(n=300)
    ds = _dataset(u, coords, values)
    model = _tiny_model(seed=2)
    cfg = TrainConfig(epochs=1, batch_size=64, lr_schedule=PiecewiseSchedule(boundaries=[(0, 1e-3)]))
    trained, report = train(model, ds, None, cfg)
    # 300 functions span more than one evaluation chunk
    assert report.initial_loss == pytest.approx(batch_loss(model, Batch(u=u, y=coords, target=values)), rel=1e-12)
    assert report.final_loss == pytest.approx(batch_loss(trained, Batch(u=u, y=coords, target=values)), rel=1e-12)


def test_divergence_aborts_with_report():
    u, coords, _ = _toy_data(n=3)
    ds = _dataset(u, coords, np.full((3, 5), 1e200))
    with pytest.raises(TrainingDiverged) as info:
        train(_tiny_model(), ds, None, TrainConfig(epochs=3, batch_size=4))
    assert info.value.report is not None
    assert info.value.report.steps == 0


def test_train_rejects_mismatched_data():
    u, coords, values = _toy_data(m=4)
    with pytest.raises(ShapeError):
        train(_tiny_model(m=3), _dataset(u, coords, values), None, TrainConfig(epochs=1))
    u, coords, values = _toy_data()
    norm = NormalizationSpec(enabled=True, output_std=2.0)
    with pytest.raises(ConfigError):
        train(_tiny_model(), _dataset(u, coords, values), _dataset(u, coords, values, norm), TrainConfig(epochs=1))


def test_predict_field():
    grid = build_grid(SQUARE, 9)
    m = len(grid.sensor_idx)
    model = init_model(MLPSpec(input_dim=m, output_dim=4), MLPSpec(input_dim=2, hidden_layers=[6], output_dim=4), 0)
    model.sensor_coords = grid.points[grid.sensor_idx].copy()
    q = SourceField(np.linspace(-1.0, 1.0, m), grid)
    field = predict_field(model, q, grid)
    assert field.provenance == "prediction"
    assert field.values.shape == (grid.n_points,)
    for i in (0, 17, grid.n_points - 1):
        assert abs(field.values[i] - forward(model, q.values, grid.points[i])) <= 1e-12 * max(1.0, abs(field.values[i]))

    for W, b in model.branch + model.trunk:
        W[...] = 0.0
        b[...] = 0.0
    assert np.all(predict_field(model, q, grid).values == 0.0)


def test_predict_field_rejects_other_sensor_sets():
    grid = build_grid(SQUARE, 9)
    other = build_grid(SQUARE, 11)
    model = init_model(MLPSpec(input_dim=len(grid.sensor_idx), output_dim=2), MLPSpec(input_dim=2, output_dim=2), 0)
    with pytest.raises(ShapeError):
        predict_field(model, SourceField(np.zeros(len(other.sensor_idx)), other), other)


def test_normalization_is_applied_and_undone():
    model = _tiny_model(seed=3)
    u, coords, _ = _toy_data()
    raw = forward_batch(model, u, coords)
    model.normalization = NormalizationSpec(enabled=True, branch_mean=1.0, branch_std=2.0,
                                            output_mean=10.0, output_std=5.0)
    pred = predict_values(model, u, coords)
    assert np.allclose(pred, forward_batch(model, (u - 1.0) / 2.0, coords) * 5.0 + 10.0)
    assert not np.allclose(pred, raw)


def test_save_load_round_trip(tmp_path):
    model = _tiny_model(seed=4)
    model.normalization = NormalizationSpec(enabled=True, branch_mean=0.5, branch_std=3.0,
                                            output_mean=-2.0, output_std=7.0)
    model.sensor_coords = np.column_stack([np.linspace(0.2, 0.8, 3), np.full(3, 0.5)])
    back = load_model(save_model(model, tmp_path / "model"))
    u, coords, _ = _toy_data()
    assert np.array_equal(predict_values(back, u, coords), predict_values(model, u, coords))
    assert back.normalization == model.normalization
    assert back.branch_spec == model.branch_spec and back.trunk_spec == model.trunk_spec
    assert np.array_equal(back.sensor_coords, model.sensor_coords)


def test_load_model_rejects_truncated_files(tmp_path):
    path = save_model(_tiny_model(), tmp_path / "model")
    blob = path / "trunk_1_W.bin"
    blob.write_bytes(blob.read_bytes()[:-16])
    with pytest.raises(ModelFormatError, match="truncated"):
        load_model(path)


def test_load_model_rejects_missing_layers_and_datasets(tmp_path):
    path = save_model(_tiny_model(), tmp_path / "model")
    (path / "branch_1_b.bin").unlink()
    with pytest.raises(ModelFormatError):
        load_model(path)
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "nothing-here")
