"""
Training and evaluation of surrogates: the cosine one-cycle schedule,
Adam, plain MSE training and Sobolev training (values plus input
gradients), R² metrics and the evaluation against the analytic
Bachelier oracle.

Losses are computed in the model's output units and normalised: value
residuals by the target variance, derivative residuals per input by the
variance of that derivative target, averaged over inputs. The balancing
factor lambda is therefore scale-free.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Any, Callable, Dict, List, Literal, NamedTuple, Optional, Sequence,
    Tuple, Union)

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import market, network, tape
from .exceptions import MetricError, NumericalError, ShapeError
from .market import BasketConfig, Dataset
from .network import MlpModel, Scaling
from ._utils import _get_type_error


logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 256
DEFAULT_EPOCHS = 100
RETRAIN_EPOCHS = 10
DEFAULT_GRID_SIZE = 512
# Central difference step for Gamma, as a fraction of the evaluation segment.
GAMMA_STEP = 1e-3
# Variances below this are treated as 1 when normalising losses.
MIN_VARIANCE = 1e-300


class OneCycleConfig(BaseModel):
    """
    Cosine one-cycle learning rate schedule: rises from `start_lr` to
    `peak_lr` over the first `rise_fraction` of the steps, then decays
    to `final_lr`. `total_steps` is filled in by the trainers when left
    unset.
    """

    model_config = ConfigDict(frozen=True)

    peak_lr: float = 0.1
    start_lr: float = 4e-3
    final_lr: float = 1e-5
    rise_fraction: float = 0.3
    total_steps: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_rates(self) -> "OneCycleConfig":
        if not 0 < self.start_lr <= self.peak_lr:
            raise ValueError("Start learning rate must be in (0, peak].")
        if not 0 < self.final_lr <= self.peak_lr:
            raise ValueError("Final learning rate must be in (0, peak].")
        if not 0 < self.rise_fraction < 1:
            raise ValueError("Rise fraction must be strictly between 0 and 1.")
        return self


def baseline_schedule() -> OneCycleConfig:
    """
    The cycle used to train a network from scratch. It keeps the default
    shape (start = peak / 25, final = peak / 1e4) at a peak that Adam on
    a standardised deep SiLU network tolerates.
    """
    return OneCycleConfig(peak_lr=5e-3, start_lr=2e-4, final_lr=5e-7)


def finetune_schedule() -> OneCycleConfig:
    """A gentler cycle for fine-tuning an already trained model."""
    return OneCycleConfig(peak_lr=2e-3, start_lr=8e-5, final_lr=2e-7)


def retrain_schedule() -> OneCycleConfig:
    """The short cycle run after each pruning step."""
    return OneCycleConfig(peak_lr=1e-3, start_lr=4e-5, final_lr=1e-7)


def lr_at(cfg: OneCycleConfig, step: int) -> float:
    """
    Learning rate at a step of the cycle.

    Parameters:
        `cfg` - the schedule; `total_steps` must be set.

        `step` - Range: 0 <= step <= total_steps
    """
    if cfg.total_steps is None:
        raise ValueError("The schedule has no total step count.")
    if not isinstance(step, (int, np.integer)):
        raise _get_type_error("step", int, step)
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"Step {step} is outside the cycle [0, {total}].")
    rise = cfg.rise_fraction * total
    if step <= rise:
        progress = step / rise
        return cfg.start_lr + (
            cfg.peak_lr - cfg.start_lr) * (1 - math.cos(math.pi * progress)) / 2
    progress = (step - rise) / (total - rise)
    return cfg.final_lr + (
        cfg.peak_lr - cfg.final_lr) * (1 + math.cos(math.pi * progress)) / 2


@dataclass
class AdamState:
    """First/second moments per parameter and the step counter."""

    first: List[np.ndarray]
    second: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros(params: Sequence[np.ndarray]) -> "AdamState":
        """A fresh state for the given parameters."""
        return AdamState(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params])


def adam_step(
    state: AdamState, params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray], lr: float
) -> Tuple[List[np.ndarray], AdamState]:
    """
    One bias-corrected Adam update. Returns the new parameters and the
    new state; the arguments are not modified.
    """
    if not len(params) == len(grads) == len(state.first):
        raise ShapeError("Parameters, gradients and state do not agree.")
    for grad in grads:
        if not np.isfinite(grad).all():
            raise NumericalError(
                f"Non-finite gradient at optimiser step {state.step + 1}.")
    step = state.step + 1
    first, second, updated = [], [], []
    correction1 = 1 - state.beta1 ** step
    correction2 = 1 - state.beta2 ** step
    for param, grad, m, v in zip(params, grads, state.first, state.second):
        if np.shape(param) != np.shape(grad):
            raise ShapeError("Gradient shape does not match its parameter.")
        m = state.beta1 * m + (1 - state.beta1) * grad
        v = state.beta2 * v + (1 - state.beta2) * grad * grad
        updated.append(
            param - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps))
        first.append(m)
        second.append(v)
    return updated, AdamState(
        first, second, step, state.beta1, state.beta2, state.eps)


class SobolevConfig(BaseModel):
    """
    Settings of Sobolev training.

    `lam` weighs the derivative term against the value term; `source`
    says where derivative targets come from: 'reference' (pathwise
    Monte Carlo derivatives of the market model) or 'network' (a frozen
    trained network).
    """

    model_config = ConfigDict(frozen=True)

    lam: float = Field(default=1.0, ge=0)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    epochs: int = Field(default=RETRAIN_EPOCHS, ge=0)
    source: Literal["reference", "network"] = "reference"
    normalise: bool = True


class LossScales(NamedTuple):
    """Normalisers of the value term and of each derivative component."""

    value: float
    derivative: np.ndarray


def loss_scales(dataset: Dataset, normalise: bool = True) -> LossScales:
    """Target variances of a dataset (ones if not normalising)."""
    if not normalise:
        return LossScales(1.0, np.ones(dataset.m))
    value = float(np.var(dataset.y))
    derivative = np.var(dataset.dydx, axis=0)
    return LossScales(
        value if value > MIN_VARIANCE else 1.0,
        np.where(derivative > MIN_VARIANCE, derivative, 1.0))


class LossResult(NamedTuple):
    """A loss, its parameter gradient and the two terms it is made of."""

    loss: float
    gradients: List[np.ndarray]
    value_loss: float
    derivative_loss: float


def _value_term(predictions: Any, y: np.ndarray, scale: float) -> Any:
    residual = tape.sub(predictions, y[:, None])
    return tape.div(
        tape.reduce_sum(tape.mul(residual, residual)), y.shape[0] * scale)


def mse_loss(
    model: MlpModel, batch: Dataset, scales: Optional[LossScales] = None
) -> LossResult:
    """Normalised mean squared value error and its parameter gradient."""
    scales = scales or loss_scales(batch)
    names = network.parameter_names(model)
    recorded, predictions = network.record_forward(model, batch.x, True)
    value_term = _value_term(predictions, batch.y, scales.value)
    recorded.set_output(value_term)
    gradients = tape.gradient(recorded, wrt=names)
    value = float(value_term.value)
    return LossResult(value, [gradients[name] for name in names], value, 0.0)


def sobolev_loss(
    model: MlpModel, batch: Dataset, lam: float,
    scales: Optional[LossScales] = None) -> LossResult:
    """
    Sobolev loss of a batch: value term + lam * derivative term, each
    normalised and averaged over the batch, with its exact parameter
    gradient.

    The input gradient of the network is itself recorded (by reversing
    the forward tape onto a new tape), so the derivative term can be
    differentiated with respect to the parameters.

    With lam = 0 this is exactly `mse_loss`.
    """
    if not isinstance(batch, Dataset):
        raise _get_type_error("batch", Dataset, batch)
    if lam < 0:
        raise ValueError("Lambda must not be negative.")
    scales = scales or loss_scales(batch)
    if lam == 0:
        return mse_loss(model, batch, scales)
    names = network.parameter_names(model)
    forward_tape, predictions = network.record_forward(model, batch.x, True)
    recorded = tape.reverse_recorded(forward_tape, wrt="x")
    value_term = _value_term(
        recorded.primals[predictions.index], batch.y, scales.value)
    residual = tape.sub(recorded.adjoints["x"], batch.dydx)
    derivative_term = tape.div(
        tape.reduce_sum(
            tape.div(tape.mul(residual, residual), scales.derivative)),
        batch.dydx.size)
    loss = tape.add(value_term, tape.mul(lam, derivative_term))
    recorded.set_output(loss)
    gradients = tape.gradient(recorded, wrt=names)
    return LossResult(
        float(loss.value), [gradients[name] for name in names],
        float(value_term.value), float(derivative_term.value))


@dataclass(frozen=True)
class EpochRecord:
    """Loss summary of one epoch."""

    epoch: int
    lr: float
    train_loss: float
    value_loss: float
    deriv_loss: float


@dataclass
class TrainingLog:
    """Per-epoch training records."""

    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final_loss(self) -> Optional[float]:
        """Training loss of the last epoch (None if nothing was trained)."""
        return self.records[-1].train_loss if self.records else None

    def to_frame(self) -> pd.DataFrame:
        """Columns epoch, lr, train_loss, value_loss, deriv_loss."""
        return pd.DataFrame(
            [vars(record) for record in self.records],
            columns=["epoch", "lr", "train_loss", "value_loss", "deriv_loss"])

    def write_csv(self, path: Union[str, Path]) -> None:
        """Writes the log as CSV."""
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def fit_scaling(dataset: Dataset) -> Scaling:
    """Standardisation fitted to a dataset (zero spread maps to 1)."""
    x_std = dataset.x.std(axis=0)
    y_std = float(dataset.y.std())
    return Scaling(
        dataset.x.mean(axis=0), np.where(x_std > 0, x_std, 1.0),
        float(dataset.y.mean()), y_std if y_std > 0 else 1.0)


LossFunction = Callable[[MlpModel, Dataset, LossScales], LossResult]
DataSource = Union[Dataset, Callable[[int], Dataset]]


def _fit(
    model: MlpModel, data: DataSource, schedule: OneCycleConfig, epochs: int,
    batch_size: int, seed: int, loss_function: LossFunction, normalise: bool,
    label: str) -> Tuple[MlpModel, TrainingLog]:
    # The training loop shared by every trainer. `data` is a dataset or
    # a callable returning the dataset of a given epoch.
    if not isinstance(model, MlpModel):
        raise _get_type_error("model", MlpModel, model)
    if not isinstance(schedule, OneCycleConfig):
        raise _get_type_error("schedule", OneCycleConfig, schedule)
    if epochs < 0 or batch_size < 1:
        raise ValueError("Epochs must be >= 0 and batch size >= 1.")
    dataset = data(0) if callable(data) else data
    if not len(dataset):
        raise ValueError("Cannot train on an empty dataset.")
    if model.scaling is None:
        model = model.replace(scaling=fit_scaling(dataset))
    log = TrainingLog()
    if epochs == 0:
        return model, log
    batches = math.ceil(len(dataset) / batch_size)
    if schedule.total_steps is None:
        schedule = schedule.model_copy(update={"total_steps": epochs * batches})
    scales = loss_scales(dataset, normalise)
    rng = np.random.default_rng(seed)
    params = network.parameters(model)
    state = AdamState.zeros(params)
    step = 0
    lr = schedule.start_lr
    for epoch in range(epochs):
        if epoch and callable(data):
            dataset = data(epoch)
        order = rng.permutation(len(dataset))
        totals = np.zeros(3)
        count = 0
        for start in range(0, len(dataset), batch_size):
            batch = dataset.subset(order[start:start + batch_size])
            result = loss_function(
                network.with_parameters(model, params), batch, scales)
            if not math.isfinite(result.loss):
                raise NumericalError(
                    f"{label} diverged at epoch {epoch}, step {step}: "
                    f"loss {result.loss}.")
            lr = lr_at(schedule, min(step, schedule.total_steps))
            params, state = adam_step(state, params, result.gradients, lr)
            for param in params:
                if not np.isfinite(param).all():
                    raise NumericalError(
                        f"{label} diverged at epoch {epoch}, step {step}: "
                        "non-finite parameters.")
            totals += len(batch) * np.array(
                [result.loss, result.value_loss, result.derivative_loss])
            count += len(batch)
            step += 1
        record = EpochRecord(epoch, lr, *(totals / count))
        log.records.append(record)
        logger.info(
            "%s epoch %d/%d lr=%.3g loss=%.6g value=%.6g deriv=%.6g",
            label, epoch + 1, epochs, lr, record.train_loss,
            record.value_loss, record.deriv_loss)
    trained = network.with_parameters(model, params)
    return trained.replace(requires_retraining=False), log


def train_mse(
    model: MlpModel, dataset: DataSource, schedule: OneCycleConfig,
    epochs: int = DEFAULT_EPOCHS, seed: int = 0,
    batch_size: int = DEFAULT_BATCH_SIZE, normalise: bool = True
) -> Tuple[MlpModel, TrainingLog]:
    """
    Fits the model to the values of a dataset with Adam on shuffled
    mini-batches. A model without scaling is first standardised to the
    data. Returns the trained model (the argument is not modified) and
    the training log. Raises `NumericalError` on divergence.
    """
    return _fit(
        model, dataset, schedule, epochs, batch_size, seed,
        mse_loss, normalise, "MSE training")


def train_sobolev(
    model: MlpModel, data: DataSource, sobolev: SobolevConfig,
    schedule: OneCycleConfig, seed: int = 0) -> Tuple[MlpModel, TrainingLog]:
    """
    Sobolev training: fits values and input gradients of the data.

    Parameters:
        `model` - starting model (unchanged).

        `data` - a `Dataset` with derivative targets or a sampler called
        with the epoch number that returns the dataset for that epoch.

        `sobolev` - lambda, batch size, epochs and normalisation.

        `schedule` - learning rate cycle.

        `seed` - shuffling seed.

    With lambda = 0 the result is bitwise identical to `train_mse` with
    the same seed, schedule, epochs and batch size.
    """
    if not isinstance(sobolev, SobolevConfig):
        raise _get_type_error("sobolev", SobolevConfig, sobolev)

    def loss_function(model, batch, scales):
        return sobolev_loss(model, batch, sobolev.lam, scales)

    return _fit(
        model, data, schedule, sobolev.epochs, sobolev.batch_size, seed,
        loss_function, sobolev.normalise, "Sobolev training")


def network_dataset(frozen: Any, inputs: Any) -> Dataset:
    """
    Training data generated by a frozen surrogate: its predictions and
    input gradients at the given inputs. No market model is involved.
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2:
        raise ShapeError("Inputs must be a 2-d batch.")
    return Dataset(x, frozen.predict(x), frozen.input_gradient(x))


def uniform_inputs(
    box: Sequence[Tuple[float, float]], n: int, seed: int) -> np.ndarray:
    """n points uniformly distributed in a box of (lo, hi) pairs."""
    lower = np.array([lo for lo, _ in box], dtype=float)
    upper = np.array([hi for _, hi in box], dtype=float)
    rng = np.random.default_rng(seed)
    return lower + (upper - lower) * rng.random((n, lower.shape[0]))


def r2_score(predictions: Any, targets: Any) -> float:
    """
    Coefficient of determination 1 - SS_res / SS_tot. Inputs are
    flattened. Raises `MetricError` for fewer than 2 values, unequal
    lengths or constant targets.
    """
    predictions = np.asarray(predictions, dtype=float).reshape(-1)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if predictions.shape != targets.shape:
        raise MetricError("Predictions and targets differ in length.")
    if targets.shape[0] < 2:
        raise MetricError("R² needs at least two values.")
    total = float(((targets - targets.mean()) ** 2).sum())
    if total == 0:
        raise MetricError("R² is undefined for constant targets.")
    return 1 - float(((targets - predictions) ** 2).sum()) / total


@dataclass(frozen=True)
class EvaluationReport:
    """R² of values, Deltas and Gammas on the evaluation grid."""

    values_r2: float
    deltas_r2: float
    gammas_r2: float
    grid: int

    def to_dict(self) -> Dict[str, Any]:
        """Plain dict for JSON."""
        return dict(vars(self))


def evaluation_grid(cfg: BasketConfig, grid_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Points evenly spaced along the diagonal of the spot box, from its
    lower to its upper corner. Returns the points (grid x m) and the
    direction of the segment.
    """
    if not isinstance(grid_size, int):
        raise _get_type_error("grid_size", int, grid_size)
    if grid_size < 2:
        raise MetricError("The evaluation grid needs at least 2 points.")
    direction = cfg.box_hi - cfg.box_lo
    steps = np.linspace(0, 1, grid_size)
    return cfg.box_lo + steps[:, None] * direction, direction


def evaluate(
    model: Any, cfg: BasketConfig, grid_size: int = DEFAULT_GRID_SIZE
) -> Tuple[EvaluationReport, pd.DataFrame]:
    """
    Compares a surrogate with the analytic Bachelier price and Greeks.

    Parameters:
        `model` - anything with `predict` and `input_gradient` (an
        `MlpModel` or an `AnalyticSurrogate`).

        `cfg` - the basket; its spot box defines the grid segment.

        `grid_size` - number of grid points. Default: 512

    Values are compared pointwise and Deltas componentwise. Gammas are
    compared in basket units: the surrogate's second derivative along
    the segment comes from central differences of its input gradient
    with a step of 1e-3 of the segment.

    Returns: the report and a per-point DataFrame with columns spot,
    value_true, value_pred, delta_true, delta_pred, gamma_true,
    gamma_pred (Greeks in basket units).
    """
    x, direction = evaluation_grid(cfg, grid_size)
    basket_step = float(cfg.weight_array @ direction)
    if basket_step == 0:
        raise MetricError("The spot box does not move the basket.")
    spot = np.asarray(market.basket_spot(cfg, x))
    value_true = np.asarray(market.analytic_price(cfg, x))
    value_pred = np.asarray(model.predict(x))
    gradient = np.asarray(model.input_gradient(x))
    upper = np.asarray(model.input_gradient(x + GAMMA_STEP * direction))
    lower = np.asarray(model.input_gradient(x - GAMMA_STEP * direction))
    curvature = ((upper - lower) @ direction) / (2 * GAMMA_STEP)
    frame = pd.DataFrame({
        "spot": spot,
        "value_true": value_true,
        "value_pred": value_pred,
        "delta_true": np.asarray(market.basket_delta(cfg, spot)),
        "delta_pred": (gradient @ direction) / basket_step,
        "gamma_true": np.asarray(market.basket_gamma(cfg, spot)),
        "gamma_pred": curvature / basket_step ** 2,
    })
    report = EvaluationReport(
        values_r2=r2_score(value_pred, value_true),
        deltas_r2=r2_score(gradient, market.analytic_delta(cfg, x)),
        gammas_r2=r2_score(frame["gamma_pred"], frame["gamma_true"]),
        grid=grid_size)
    return report, frame


@dataclass(frozen=True)
class RestartSummary:
    """Validation R² of independently initialised trainings."""

    scores: List[float]

    @property
    def mean(self) -> float:
        """Mean score."""
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        """Standard deviation of the scores."""
        return float(np.std(self.scores))


def train_from_scratch(
    hidden_widths: Sequence[int], activation: str, dataset: Dataset,
    schedule: OneCycleConfig, epochs: int, seeds: Sequence[int],
    validator: Callable[[MlpModel], float],
    batch_size: int = DEFAULT_BATCH_SIZE
) -> Tuple[List[MlpModel], RestartSummary]:
    """
    Trains the given architecture from random weights once per seed,
    to compare a pruned architecture with its untrained twin.
    """
    models, scores = [], []
    for seed in seeds:
        start = network.init_model(dataset.m, hidden_widths, activation, seed)
        trained, _ = train_mse(
            start, dataset, schedule, epochs, seed, batch_size)
        models.append(trained)
        scores.append(validator(trained))
        logger.info("Restart with seed %d: R² %.6f", seed, scores[-1])
    return models, RestartSummary(scores)
