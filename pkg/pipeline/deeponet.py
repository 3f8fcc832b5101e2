"""
DeepONet in NumPy float64:

    G(u)(y) = sum_i f_i(u) * g_i(y)

with a branch MLP f over the m sensor values of the input function and a
trunk MLP g over the output coordinate (x, y). Hidden layers use relu,
output layers are linear, and there is no bias after the inner product.

Parameters of a layer are stored as (W, b) with W of shape (fan_in, fan_out).
"""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Annotated, Any, Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dataset import ARRAY_DTYPE, NormalizationSpec, OperatorDataset, read_array, read_manifest
from .domain import Grid
from .errors import ConfigError, ModelFormatError, ShapeError, TrainingDiverged
from .fd_source import SourceField
from .gpr import TemperatureField
from .metrics import r2_score

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1

Layer = Tuple[np.ndarray, np.ndarray]


class MLPSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: int = Field(ge=1)
    hidden_layers: List[int] = Field(default_factory=list)
    output_dim: int = Field(ge=1)

    @model_validator(mode="after")
    def _check_widths(self):
        if any(w < 1 for w in self.hidden_layers):
            raise ValueError(f"hidden layer widths must be >= 1, got {self.hidden_layers}")
        return self

    @property
    def dims(self) -> List[int]:
        return [self.input_dim, *self.hidden_layers, self.output_dim]


class NetworkConfig(BaseModel):
    """Architecture as it appears in run configs; input dims come from the data"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    branch_hidden: List[int] = Field(default_factory=list)
    trunk_hidden: List[int] = Field(default_factory=lambda: [150, 150, 150, 150])
    latent_dim: int = Field(200, ge=1)

    def specs(self, m: int) -> Tuple[MLPSpec, MLPSpec]:
        return (MLPSpec(input_dim=m, hidden_layers=self.branch_hidden, output_dim=self.latent_dim),
                MLPSpec(input_dim=2, hidden_layers=self.trunk_hidden, output_dim=self.latent_dim))


@dataclass
class DeepONetModel:
    branch_spec: MLPSpec
    trunk_spec: MLPSpec
    branch: List[Layer]
    trunk: List[Layer]
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    sensor_coords: Optional[np.ndarray] = None
    grid: Optional[Dict[str, Any]] = None

    @property
    def m(self) -> int:
        return self.branch_spec.input_dim

    @property
    def c(self) -> int:
        return self.branch_spec.output_dim

    def parameters(self) -> List[np.ndarray]:
        """Every weight and bias array, branch first, in layer order (live references)"""
        return [a for layer in self.branch + self.trunk for a in layer]

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.parameters()))

    def copy(self) -> "DeepONetModel":
        return copy.deepcopy(self)


def _glorot_layers(dims: List[int], rng: np.random.Generator) -> List[Layer]:
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        layers.append((rng.normal(0.0, std, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return layers


def init_model(branch_spec: MLPSpec, trunk_spec: MLPSpec, seed: int) -> DeepONetModel:
    if branch_spec.output_dim != trunk_spec.output_dim:
        raise ConfigError(f"branch output {branch_spec.output_dim} != trunk output {trunk_spec.output_dim}")
    rng = np.random.default_rng(seed)
    model = DeepONetModel(branch_spec, trunk_spec, _glorot_layers(branch_spec.dims, rng),
                          _glorot_layers(trunk_spec.dims, rng))
    logger.info(f"Initialized DeepONet: branch {branch_spec.dims}, trunk {trunk_spec.dims}, "
                f"{model.n_parameters()} parameters")
    return model


def _mlp(layers: List[Layer], x: np.ndarray, cache: Optional[list] = None) -> np.ndarray:
    a = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        if cache is not None:
            cache.append((a, z))
        a = z if i == last else np.maximum(z, 0.0)
    return a


def _mlp_backward(layers: List[Layer], cache: list, d_out: np.ndarray) -> List[np.ndarray]:
    grads: List[np.ndarray] = []
    dz = d_out
    for i in range(len(layers) - 1, -1, -1):
        a_prev, _ = cache[i]
        W, _ = layers[i]
        grads[:0] = [a_prev.T @ dz, dz.sum(axis=0)]
        if i > 0:
            dz = (dz @ W.T) * (cache[i - 1][1] > 0)
    return grads


def _check_inputs(model: DeepONetModel, u: np.ndarray, y: np.ndarray):
    if u.shape[-1] != model.m:
        raise ShapeError(f"input function has {u.shape[-1]} sensor values, model expects {model.m}")
    if y.shape[-1] != 2:
        raise ShapeError(f"coordinates must be (x, y) pairs, got trailing dimension {y.shape[-1]}")


def forward(model: DeepONetModel, u_vec, coord) -> float:
    u = np.asarray(u_vec, dtype=np.float64).reshape(1, -1)
    y = np.asarray(coord, dtype=np.float64).reshape(1, -1)
    _check_inputs(model, u, y)
    return float(_mlp(model.branch, u)[0] @ _mlp(model.trunk, y)[0])


def forward_batch(model: DeepONetModel, u, coords) -> np.ndarray:
    """(B, m) functions x (P, 2) coordinates -> (B, P); one branch pass per function"""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    y = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    _check_inputs(model, u, y)
    return _mlp(model.branch, u) @ _mlp(model.trunk, y).T


def loss_mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ShapeError("loss_mse of an empty batch")
    if pred.shape != target.shape:
        raise ShapeError(f"prediction has {pred.size} values, target has {target.size}")
    return float(np.mean((pred - target) ** 2))


@dataclass
class Batch:
    """Unique function rows `u` and coordinates `y` of a batch.

    With `pairs` = (rows, cols) the batch is the listed (u[rows[k]], y[cols[k]])
    triples and `target` is 1-D; without it, every function is paired with
    every coordinate and `target` is (len(u), len(y)).
    """
    u: np.ndarray
    y: np.ndarray
    target: np.ndarray
    pairs: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __len__(self) -> int:
        return int(self.target.size)


def _predict(model: DeepONetModel, batch: Batch, caches=None):
    bc, tc = (None, None) if caches is None else caches
    f = _mlp(model.branch, batch.u, bc)
    g = _mlp(model.trunk, batch.y, tc)
    if batch.pairs is None:
        return f @ g.T, f, g
    rows, cols = batch.pairs
    return np.einsum("kc,kc->k", f[rows], g[cols]), f, g


def batch_loss(model: DeepONetModel, batch: Batch) -> float:
    return loss_mse(_predict(model, batch)[0], batch.target)


def backward(model: DeepONetModel, batch: Batch) -> Tuple[float, List[np.ndarray]]:
    """Batch MSE and its gradient for every array of model.parameters(), same order"""
    if len(batch) == 0:
        raise ShapeError("backward needs a nonempty batch")
    bc, tc = [], []
    pred, f, g = _predict(model, batch, (bc, tc))
    resid = pred - batch.target
    loss = float(np.mean(resid ** 2))
    d_pred = 2.0 * resid / resid.size
    if batch.pairs is None:
        d_f = d_pred @ g
        d_g = d_pred.T @ f
    else:
        rows, cols = batch.pairs
        d_f = np.zeros_like(f)
        d_g = np.zeros_like(g)
        np.add.at(d_f, rows, d_pred[:, None] * g[cols])
        np.add.at(d_g, cols, d_pred[:, None] * f[rows])
    return loss, _mlp_backward(model.branch, bc, d_f) + _mlp_backward(model.trunk, tc, d_g)


class Adam:
    def __init__(self, params: List[np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: List[np.ndarray], grads: List[np.ndarray], lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ExponentialSchedule(BaseModel):
    """rate = start * decay_rate ** (step / decay_steps)"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["exponential"] = "exponential"
    start: float = Field(1e-4, gt=0)
    decay_rate: float = Field(0.96, gt=0)
    decay_steps: int = Field(1000, ge=1)

    def rate(self, step: int, epoch: int) -> float:
        return self.start * self.decay_rate ** (step / self.decay_steps)


class PiecewiseSchedule(BaseModel):
    """Constant rate per epoch range, as [[first_epoch, rate], ...]"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["piecewise"] = "piecewise"
    boundaries: List[Tuple[int, float]]

    @model_validator(mode="after")
    def _check(self):
        epochs = [e for e, _ in self.boundaries]
        if not epochs or epochs[0] != 0 or epochs != sorted(set(epochs)):
            raise ValueError(f"piecewise boundaries must start at epoch 0 and increase, got {epochs}")
        if any(r <= 0 for _, r in self.boundaries):
            raise ValueError("learning rates must be positive")
        return self

    def rate(self, step: int, epoch: int) -> float:
        current = self.boundaries[0][1]
        for first, r in self.boundaries:
            if epoch >= first:
                current = r
        return current


LRSchedule = Annotated[Union[ExponentialSchedule, PiecewiseSchedule], Field(discriminator="kind")]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(200, ge=1)
    batch_size: int = Field(160, ge=1)
    lr_schedule: LRSchedule = Field(default_factory=ExponentialSchedule)
    seed: int = 0
    batch_mode: Literal["triples", "functions"] = "triples"
    # path of a saved model to resume from; resolved by the caller
    warm_start: Optional[str] = None
    log_every: int = Field(10, ge=1)


@dataclass
class TrainReport:
    epoch_losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None
    test_loss: Optional[float] = None
    test_r2: Optional[float] = None
    steps: int = 0
    wall_clock: float = 0.0
    seed: int = 0

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _full_pass_loss(model: DeepONetModel, u: np.ndarray, y: np.ndarray, target: np.ndarray, chunk: int = 256) -> float:
    total = 0.0
    for s in range(0, len(u), chunk):
        batch = Batch(u=u[s:s + chunk], y=y, target=target[s:s + chunk])
        total += batch_loss(model, batch) * len(batch)
    return total / target.size


def _batches(mode: str, n: int, p: int, size: int, rng: np.random.Generator, u, y, target):
    if mode == "functions":
        order = rng.permutation(n)
        for s in range(0, n, size):
            rows = np.sort(order[s:s + size])
            yield Batch(u=u[rows], y=y, target=target[rows])
        return
    order = rng.permutation(n * p)
    for s in range(0, n * p, size):
        flat = order[s:s + size]
        fi, ci = np.divmod(flat, p)
        uf, rows = np.unique(fi, return_inverse=True)
        uc, cols = np.unique(ci, return_inverse=True)
        yield Batch(u=u[uf], y=y[uc], target=target[fi, ci], pairs=(rows, cols))


def train(model: DeepONetModel, train_ds: OperatorDataset, test_ds: Optional[OperatorDataset],
          cfg: TrainConfig, progress_callback: Optional[Callable] = None) -> Tuple[DeepONetModel, TrainReport]:
    """
    Adam over shuffled batches of the training set, starting from `model`.

    Args:
        model: freshly initialized or warm-start model; left unmodified
        train_ds / test_ds: datasets sharing m and normalization
        cfg: epochs, batch size and mode, schedule, shuffle seed
        progress_callback: Optional callback for progress updates
                          Called with (message, epoch, total_epochs, None)
    """
    if train_ds.m != model.m:
        raise ShapeError(f"training data has m={train_ds.m}, model expects m={model.m}")
    if test_ds is not None:
        if test_ds.m != train_ds.m:
            raise ShapeError(f"test data has m={test_ds.m}, training data m={train_ds.m}")
        if test_ds.meta.normalization != train_ds.meta.normalization:
            raise ConfigError("train and test datasets carry different normalization")

    model = model.copy()
    norm = train_ds.meta.normalization
    model.normalization = norm
    model.sensor_coords = train_ds.sensor_coords.copy()
    model.grid = dict(train_ds.meta.grid, domain=train_ds.meta.domain, resolution=train_ds.meta.resolution)

    u = norm.branch(train_ds.branch_inputs)
    y = train_ds.output_coords
    target = norm.output(train_ds.output_values)
    params = model.parameters()
    opt = Adam(params)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(seed=cfg.seed)
    started = time.perf_counter()

    report.initial_loss = _full_pass_loss(model, u, y, target)
    logger.info(f"Training {cfg.epochs} epochs, batch {cfg.batch_size} {cfg.batch_mode}, "
                f"n={train_ds.n}, p={train_ds.p}, initial loss {report.initial_loss:.6e}")
    if progress_callback:
        progress_callback(f"Starting training ({cfg.epochs} epochs)", 0, cfg.epochs, None)

    for epoch in range(cfg.epochs):
        lr = cfg.lr_schedule.rate(report.steps, epoch)
        sq_sum, count = 0.0, 0
        for batch in _batches(cfg.batch_mode, train_ds.n, train_ds.p, cfg.batch_size, rng, u, y, target):
            lr = cfg.lr_schedule.rate(report.steps, epoch)
            loss, grads = backward(model, batch)
            if not np.isfinite(loss):
                report.wall_clock = time.perf_counter() - started
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {report.steps + 1}", report)
            opt.step(params, grads, lr)
            report.steps += 1
            sq_sum += loss * len(batch)
            count += len(batch)
        report.epoch_losses.append(sq_sum / count)
        report.learning_rates.append(lr)
        if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss {report.epoch_losses[-1]:.6e}, lr {lr:.3g}")
        if progress_callback:
            progress_callback(f"Epoch {epoch + 1}: loss {report.epoch_losses[-1]:.4e}", epoch + 1, cfg.epochs, None)

    report.final_loss = _full_pass_loss(model, u, y, target)
    if not np.isfinite(report.final_loss):
        raise TrainingDiverged("non-finite loss after the last epoch", report)
    if test_ds is not None:
        t_target = norm.output(test_ds.output_values)
        report.test_loss = _full_pass_loss(model, norm.branch(test_ds.branch_inputs), test_ds.output_coords, t_target)
        pred = predict_values(model, test_ds.branch_inputs, test_ds.output_coords)
        report.test_r2 = r2_score(pred, test_ds.output_values)
        logger.info(f"Test loss {report.test_loss:.6e}, pooled test R² {report.test_r2:.6f}")
    report.wall_clock = time.perf_counter() - started
    return model, report


def predict_values(model: DeepONetModel, branch_inputs, coords) -> np.ndarray:
    """Temperatures in physical units for raw (unnormalized) input functions"""
    u = model.normalization.branch(np.atleast_2d(np.asarray(branch_inputs, dtype=np.float64)))
    return model.normalization.denormalize(forward_batch(model, u, coords))


def predict_field(model: DeepONetModel, q_field: SourceField, grid: Grid) -> TemperatureField:
    sensors = grid.points[grid.sensor_idx]
    if len(q_field.values) != model.m or (
            model.sensor_coords is not None
            and (model.sensor_coords.shape != sensors.shape
                 or not np.allclose(model.sensor_coords, sensors, rtol=0, atol=1e-9 * grid.h))):
        raise ShapeError(f"heat source has {len(q_field.values)} sensors on this grid; "
                         f"the model was trained on a different sensor set of {model.m}")
    return TemperatureField(predict_values(model, q_field.values, grid.points)[0], "prediction")


def save_model(model: DeepONetModel, path) -> Path:
    path = Path(path)
    arrays = {}
    try:
        path.mkdir(parents=True, exist_ok=True)
        named = [(f"{net}_{i}_{part}", arr)
                 for net, layers in (("branch", model.branch), ("trunk", model.trunk))
                 for i, layer in enumerate(layers)
                 for part, arr in zip(("W", "b"), layer)]
        if model.sensor_coords is not None:
            named.append(("sensor_coords", model.sensor_coords))
        for name, arr in named:
            arr = np.ascontiguousarray(arr, dtype=ARRAY_DTYPE)
            arr.tofile(path / f"{name}.bin")
            arrays[name] = {"file": f"{name}.bin", "shape": list(arr.shape)}
        manifest = {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "deeponet_model",
            "byte_order": "little",
            "dtype": "float64",
            "branch_spec": model.branch_spec.model_dump(),
            "trunk_spec": model.trunk_spec.model_dump(),
            "normalization": model.normalization.model_dump(),
            "grid": model.grid,
            "arrays": arrays,
        }
        tmp = path / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2))
        os.replace(tmp, path / "manifest.json")
    except OSError as e:
        raise ModelFormatError(f"could not write model to {path}: {e}") from e
    logger.info(f"Saved model to {path}")
    return path


def load_model(path) -> DeepONetModel:
    path = Path(path)
    manifest = read_manifest(path, "deeponet_model", MODEL_FORMAT_VERSION, error=ModelFormatError)
    try:
        branch_spec = MLPSpec.model_validate(manifest["branch_spec"])
        trunk_spec = MLPSpec.model_validate(manifest["trunk_spec"])
        norm = NormalizationSpec.model_validate(manifest.get("normalization", {}))
    except (KeyError, ValidationError) as e:
        raise ModelFormatError(f"invalid model manifest in {path}: {e}") from e
    arrays = manifest.get("arrays", {})

    def layers(net: str, dims: List[int]) -> List[Layer]:
        out = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            try:
                w_entry, b_entry = arrays[f"{net}_{i}_W"], arrays[f"{net}_{i}_b"]
            except KeyError:
                raise ModelFormatError(f"model in {path} is missing {net} layer {i}") from None
            out.append((read_array(path, w_entry, (fan_in, fan_out), error=ModelFormatError),
                        read_array(path, b_entry, (fan_out,), error=ModelFormatError)))
        return out

    sensor_coords = None
    if "sensor_coords" in arrays:
        sensor_coords = read_array(path, arrays["sensor_coords"], (branch_spec.input_dim, 2), error=ModelFormatError)
    model = DeepONetModel(branch_spec, trunk_spec, layers("branch", branch_spec.dims),
                          layers("trunk", trunk_spec.dims), normalization=norm,
                          sensor_coords=sensor_coords, grid=manifest.get("grid"))
    logger.info(f"Loaded model from {path}: m={model.m}, c={model.c}")
    return model
