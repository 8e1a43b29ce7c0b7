"""
The Bachelier (normal) model for a Gaussian basket: closed-form price
and Greeks, a correlated Monte Carlo sampler with pathwise derivatives,
sigmoidal payoff smoothing and the CSV dataset format.

All prices are under the T-forward measure with zero rate and drift,
so spot equals forward and the terminal basket is exactly normal:
B_T = B_0 + sigma_B * sqrt(T) * xi.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import (
    Any, Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple,
    Union)

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import erfc, expit

from . import tape
from .exceptions import ArtifactError, MarketError, ShapeError
from .interval import Interval
from ._utils import _get_type_error, _keep_in_range


logger = logging.getLogger(__name__)

WEIGHT_SUM_TOLERANCE = 1e-12
CORRELATION_TOLERANCE = 1e-12
# Samples per random substream; results do not depend on worker count.
CHUNK_SIZE = 4096
MAX_WORKERS = 64
# Normal draws generated at once per chunk when averaging many paths.
PATH_BLOCK = 1 << 20


class BasketConfig(BaseModel):
    """
    A basket of m assets with normal (absolute) volatilities.

    Fields:
        `weights` - basket weights, summing to 1.

        `vols` - absolute volatilities (price units per sqrt(year)).

        `correlation` - m x m correlation matrix (symmetric, unit
        diagonal, positive semi-definite).

        `maturity` - years. Default: 1

        `strike` - price units. Default: 100

        `spot_box` - per asset (lo, hi) range that initial forwards are
        sampled from. lo == hi fixes an asset.

        `smoothing_width` - if set, training payoffs are sigmoidally
        smoothed with this width.
    """

    model_config = ConfigDict(frozen=True)

    weights: List[float]
    vols: List[float]
    correlation: List[List[float]]
    maturity: float = 1.0
    strike: float = 100.0
    spot_box: List[Tuple[float, float]]
    smoothing_width: Optional[float] = None

    @field_validator("vols")
    @classmethod
    def _check_vols(cls, vols: List[float]) -> List[float]:
        if not all(math.isfinite(vol) and vol > 0 for vol in vols):
            raise ValueError("Volatilities must be positive.")
        return vols

    @field_validator("maturity")
    @classmethod
    def _check_maturity(cls, maturity: float) -> float:
        if not (math.isfinite(maturity) and maturity > 0):
            raise ValueError("Maturity must be positive.")
        return maturity

    @field_validator("strike")
    @classmethod
    def _check_strike(cls, strike: float) -> float:
        if not (math.isfinite(strike) and strike > 0):
            raise ValueError("Strike must be positive.")
        return strike

    @field_validator("smoothing_width")
    @classmethod
    def _check_smoothing_width(cls, width: Optional[float]) -> Optional[float]:
        if width is not None and not (math.isfinite(width) and width > 0):
            raise ValueError("Smoothing width must be positive.")
        return width

    @model_validator(mode="after")
    def _check_basket(self) -> "BasketConfig":
        m = len(self.weights)
        if m < 1:
            raise ValueError("A basket needs at least one asset.")
        if len(self.vols) != m or len(self.spot_box) != m:
            raise ValueError(
                "Weights, volatilities and spot box must have one entry "
                "per asset.")
        if abs(sum(self.weights) - 1) > WEIGHT_SUM_TOLERANCE:
            raise ValueError("Weights must sum to 1.")
        for lo, hi in self.spot_box:
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError("Spot box bounds must be finite with lo <= hi.")
        rho = np.asarray(self.correlation, dtype=float)
        if rho.shape != (m, m):
            raise ValueError(f"Correlation must be a {m}x{m} matrix.")
        if np.abs(rho - rho.T).max() > CORRELATION_TOLERANCE:
            raise ValueError("Correlation must be symmetric.")
        if np.abs(np.diag(rho) - 1).max() > CORRELATION_TOLERANCE:
            raise ValueError("Correlation must have a unit diagonal.")
        if np.linalg.eigvalsh(rho).min() < -CORRELATION_TOLERANCE:
            raise ValueError("Correlation must be positive semi-definite.")
        return self

    @property
    def m(self) -> int:
        """Number of assets."""
        return len(self.weights)

    @property
    def weight_array(self) -> np.ndarray:
        """Weights as an array."""
        return np.asarray(self.weights, dtype=float)

    @property
    def vol_array(self) -> np.ndarray:
        """Volatilities as an array."""
        return np.asarray(self.vols, dtype=float)

    @property
    def correlation_array(self) -> np.ndarray:
        """Correlation matrix as an array."""
        return np.asarray(self.correlation, dtype=float)

    @property
    def box_lo(self) -> np.ndarray:
        """Lower corner of the spot box."""
        return np.array([lo for lo, _ in self.spot_box], dtype=float)

    @property
    def box_hi(self) -> np.ndarray:
        """Upper corner of the spot box."""
        return np.array([hi for _, hi in self.spot_box], dtype=float)

    @property
    def box(self) -> List[Interval]:
        """The spot box as intervals."""
        return [Interval(lo, hi) for lo, hi in self.spot_box]


def default_basket(
    m: int = 5, vol: float = 20.0, rho: float = 0.5, maturity: float = 1.0,
    strike: float = 100.0, box: Tuple[float, float] = (90.0, 110.0),
    smoothing_width: Optional[float] = None) -> BasketConfig:
    """An equally weighted basket with one common volatility and correlation."""
    correlation = [[1.0 if j == k else rho for k in range(m)] for j in range(m)]
    return BasketConfig(
        weights=[1 / m] * m, vols=[vol] * m, correlation=correlation,
        maturity=maturity, strike=strike, spot_box=[box] * m,
        smoothing_width=smoothing_width)


def norm_cdf(x: Any) -> Any:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / math.sqrt(2))


def norm_pdf(x: Any) -> Any:
    """Standard normal density."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def basket_vol(cfg: BasketConfig) -> float:
    """sigma_B = sqrt(sum_jk w_j w_k s_j s_k rho_jk)."""
    scaled = cfg.weight_array * cfg.vol_array
    variance = float(scaled @ cfg.correlation_array @ scaled)
    # Round-off can push a perfectly hedged basket slightly negative.
    return math.sqrt(max(variance, 0.0))


def _terminal_scale(cfg: BasketConfig) -> float:
    scale = basket_vol(cfg) * math.sqrt(cfg.maturity)
    if scale == 0:
        raise MarketError("The basket has zero volatility.")
    return scale


def _check_forwards(cfg: BasketConfig, forwards: Any) -> np.ndarray:
    forwards = np.asarray(forwards, dtype=float)
    if forwards.ndim not in (1, 2) or forwards.shape[-1] != cfg.m:
        raise ShapeError(
            f"Expected forwards with {cfg.m} columns, got shape {forwards.shape}.")
    return forwards


def _scalar_or_array(value: np.ndarray) -> Union[float, np.ndarray]:
    return float(value) if np.ndim(value) == 0 else value


def basket_spot(cfg: BasketConfig, forwards: Any) -> Union[float, np.ndarray]:
    """B_0 = sum_i w_i F0_i, for one vector or row-wise for a batch."""
    return _scalar_or_array(_check_forwards(cfg, forwards) @ cfg.weight_array)


def basket_price(cfg: BasketConfig, b0: Any) -> Union[float, np.ndarray]:
    """Call price as a function of the basket level."""
    scale = _terminal_scale(cfg)
    moneyness = np.asarray(b0, dtype=float) - cfg.strike
    z = moneyness / scale
    return _scalar_or_array(moneyness * norm_cdf(z) + scale * norm_pdf(z))


def basket_delta(cfg: BasketConfig, b0: Any) -> Union[float, np.ndarray]:
    """dV/dB_0 = Phi(z)."""
    z = (np.asarray(b0, dtype=float) - cfg.strike) / _terminal_scale(cfg)
    return _scalar_or_array(norm_cdf(z))


def basket_gamma(cfg: BasketConfig, b0: Any) -> Union[float, np.ndarray]:
    """d2V/dB_0^2 = phi(z) / (sigma_B sqrt(T))."""
    scale = _terminal_scale(cfg)
    z = (np.asarray(b0, dtype=float) - cfg.strike) / scale
    return _scalar_or_array(norm_pdf(z) / scale)


def _price_graph(cfg: BasketConfig, forwards: tape.Variable) -> tape.Variable:
    # The price formula in tape operations, so it can be differentiated.
    shape = forwards.shape
    if len(shape) not in (1, 2) or shape[-1] != cfg.m:
        raise ShapeError(f"Expected forwards with {cfg.m} columns.")
    weighted = tape.mul(forwards, cfg.weight_array)
    b0 = tape.reduce_sum(weighted) if len(shape) == 1 else tape.sum_to(
        weighted, (shape[0], 1))
    scale = _terminal_scale(cfg)
    moneyness = tape.sub(b0, cfg.strike)
    z = tape.div(moneyness, scale)
    return tape.add(
        tape.mul(moneyness, tape.norm_cdf(z)), tape.mul(scale, tape.norm_pdf(z)))


def analytic_price(cfg: BasketConfig, forwards: Any) -> Any:
    """
    Bachelier basket call price
    V = (B_0 - K) Phi(z) + sigma_B sqrt(T) phi(z), z = (B_0 - K) / (sigma_B sqrt(T)).

    Parameters:
        `cfg` - the basket.

        `forwards` - initial forwards, one vector of length m or a batch
        of shape (n, m). A tape `Variable` is recorded instead, so the
        price can be differentiated by AD.
    """
    if not isinstance(cfg, BasketConfig):
        raise _get_type_error("cfg", BasketConfig, cfg)
    if isinstance(forwards, tape.Variable):
        return _price_graph(cfg, forwards)
    return basket_price(cfg, basket_spot(cfg, forwards))


def analytic_delta(cfg: BasketConfig, forwards: Any) -> np.ndarray:
    """dV/dF0_i = w_i Phi(z), shape (m,) or (n, m)."""
    delta = np.asarray(basket_delta(cfg, basket_spot(cfg, forwards)))
    return delta[..., None] * cfg.weight_array


def analytic_gamma(cfg: BasketConfig, forwards: Any) -> np.ndarray:
    """
    Hessian w_i w_j phi(z) / (sigma_B sqrt(T)), shape (m, m) or (n, m, m).
    It is symmetric and of rank one.
    """
    gamma = np.asarray(basket_gamma(cfg, basket_spot(cfg, forwards)))
    weights = cfg.weight_array
    return gamma[..., None, None] * np.outer(weights, weights)


def smooth_payoff(x: Any, width: float) -> Any:
    """
    Sigmoidally smoothed call payoff x * sigmoid(x / width), which
    tends to max(x, 0) as the width tends to 0.
    """
    _check_width(width)
    x = np.asarray(x, dtype=float)
    return _scalar_or_array(x * expit(x / width))


def smooth_payoff_derivative(x: Any, width: float) -> Any:
    """Derivative of `smooth_payoff` with respect to x."""
    _check_width(width)
    u = np.asarray(x, dtype=float) / width
    s = expit(u)
    return _scalar_or_array(s * (1 + u * (1 - s)))


def _check_width(width: float) -> None:
    if not isinstance(width, (int, float)):
        raise _get_type_error("width", (int, float), width)
    if not (math.isfinite(width) and width > 0):
        raise MarketError("Smoothing width must be positive.")


def sigmoid_blend(
    x: Any, f1: Callable[[Any], Any], f2: Callable[[Any], Any],
    point: float, width: float) -> Any:
    """
    Blends f1 (left of `point`) into f2 (right of `point`) with a
    sigmoid of the given width: f1 (1 - s) + f2 s, s = sigmoid((x - point) / width).
    smooth_payoff(x, w) is the blend of 0 and x at 0.
    """
    _check_width(width)
    x = np.asarray(x, dtype=float)
    s = expit((x - point) / width)
    return _scalar_or_array(f1(x) * (1 - s) + f2(x) * s)


class TrainingSample(NamedTuple):
    """One (x, y, dy/dx) training triplet."""

    x: np.ndarray
    y: float
    dydx: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """
    Columnar training data: inputs x (n x m), targets y (n) and
    pathwise derivatives dydx (n x m).
    """

    x: np.ndarray
    y: np.ndarray
    dydx: np.ndarray

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=float)
        y = np.array(self.y, dtype=float).reshape(-1)
        dydx = np.array(self.dydx, dtype=float)
        if x.ndim != 2 or dydx.shape != x.shape or y.shape[0] != x.shape[0]:
            raise ShapeError(
                f"Inconsistent dataset shapes {x.shape}, {y.shape}, "
                f"{dydx.shape}.")
        if not (
            np.isfinite(x).all() and np.isfinite(y).all()
            and np.isfinite(dydx).all()):
            raise ValueError("Datasets must be finite.")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "dydx", dydx)

    def __len__(self) -> int:
        return self.x.shape[0]

    def __iter__(self) -> Iterator[TrainingSample]:
        for i in range(len(self)):
            yield TrainingSample(self.x[i], float(self.y[i]), self.dydx[i])

    @property
    def m(self) -> int:
        """Input dimension."""
        return self.x.shape[1]

    def subset(self, indices: Union[slice, Sequence[int], np.ndarray]) -> "Dataset":
        """The rows selected by a slice, index list or boolean mask."""
        return Dataset(self.x[indices], self.y[indices], self.dydx[indices])

    def hull(self) -> List[Interval]:
        """Per input column, the smallest interval containing the data."""
        if not len(self):
            raise ShapeError("An empty dataset has no hull.")
        return [
            Interval(lo, hi)
            for lo, hi in zip(self.x.min(axis=0), self.x.max(axis=0))]

    def to_frame(self) -> pd.DataFrame:
        """The dataset as a DataFrame with columns x_i, y, dydx_i."""
        columns = {f"x_{i}": self.x[:, i] for i in range(self.m)}
        columns["y"] = self.y
        columns.update({f"dydx_{i}": self.dydx[:, i] for i in range(self.m)})
        return pd.DataFrame(columns)


def write_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """Writes a dataset as CSV with 17 significant digits (lossless)."""
    dataset.to_frame().to_csv(path, index=False, float_format="%.17g")


def read_dataset(path: Union[str, Path]) -> Dataset:
    """Reads a dataset written by `write_dataset`."""
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"Dataset file {path} does not exist.")
    frame = pd.read_csv(path, float_precision="round_trip")
    m = sum(1 for column in frame.columns if column.startswith("x_"))
    x_columns = [f"x_{i}" for i in range(m)]
    dydx_columns = [f"dydx_{i}" for i in range(m)]
    if list(frame.columns) != x_columns + ["y"] + dydx_columns:
        raise ShapeError(f"Dataset file {path} has unexpected columns.")
    return Dataset(
        frame[x_columns].to_numpy(float), frame["y"].to_numpy(float),
        frame[dydx_columns].to_numpy(float))


def _cholesky(cfg: BasketConfig) -> np.ndarray:
    try:
        return np.linalg.cholesky(cfg.correlation_array)
    except np.linalg.LinAlgError as e:
        raise MarketError(f"Correlation is not Cholesky-factorisable: {e}") from e


def _payoff(cfg: BasketConfig, terminal_basket: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # Payoff and its pathwise derivative with respect to B_0.
    moneyness = terminal_basket - cfg.strike
    if cfg.smoothing_width is None:
        return np.maximum(moneyness, 0.0), (moneyness > 0).astype(float)
    return (
        np.asarray(smooth_payoff(moneyness, cfg.smoothing_width)),
        np.asarray(smooth_payoff_derivative(moneyness, cfg.smoothing_width)))


def _increments(
    rng: np.random.Generator, cfg: BasketConfig, factor: np.ndarray,
    shape: Tuple[int, ...]) -> np.ndarray:
    # Terminal minus initial forwards, shape + (m,).
    normals = rng.standard_normal(shape + (cfg.m,))
    return (normals @ factor.T) * (cfg.vol_array * math.sqrt(cfg.maturity))


def _sample_chunk(
    cfg: BasketConfig, chunk: int, size: int, seed: int, paths: int,
    lower: np.ndarray, upper: np.ndarray, factor: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk,)))
    x = lower + (upper - lower) * rng.random((size, cfg.m))
    b0 = x @ cfg.weight_array
    y = np.zeros(size)
    slope = np.zeros(size)
    block = max(1, PATH_BLOCK // (size * cfg.m))
    for start in range(0, paths, block):
        count = min(block, paths - start)
        increments = _increments(rng, cfg, factor, (size, count))
        value, derivative = _payoff(
            cfg, b0[:, None] + increments @ cfg.weight_array)
        y += value.sum(axis=1)
        slope += derivative.sum(axis=1)
    return x, y / paths, (slope / paths)[:, None] * cfg.weight_array


def _sample(
    cfg: BasketConfig, n: int, seed: int, workers: int, paths: int,
    lower: np.ndarray, upper: np.ndarray) -> Dataset:
    if not isinstance(n, int):
        raise _get_type_error("n", int, n)
    if n < 1:
        raise ValueError("At least one sample must be drawn.")
    if not isinstance(paths, int):
        raise _get_type_error("paths", int, paths)
    if paths < 1:
        raise ValueError("Every sample needs at least one path.")
    if not isinstance(workers, int):
        raise _get_type_error("workers", int, workers)
    workers = int(_keep_in_range(workers, 1, MAX_WORKERS))
    factor = _cholesky(cfg)
    sizes = [min(CHUNK_SIZE, n - start) for start in range(0, n, CHUNK_SIZE)]

    def run(chunk: int):
        return _sample_chunk(
            cfg, chunk, sizes[chunk], seed, paths, lower, upper, factor)

    logger.debug(
        "Sampling %d inputs x %d paths in %d chunks on %d workers",
        n, paths, len(sizes), workers)
    if workers == 1:
        parts = [run(chunk) for chunk in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(run, range(len(sizes))))
    x, y, dydx = (np.concatenate(arrays) for arrays in zip(*parts))
    return Dataset(x, y, dydx)


def sample(
    cfg: BasketConfig, n: int, seed: int, workers: int = 1,
    paths: int = 1) -> Dataset:
    """
    Draws n training samples.

    For each sample the initial forwards are uniform in the spot box,
    the terminal forwards follow from correlated normals in one exact
    step, y is the call payoff on the terminal basket (smoothed if the
    config sets a smoothing width) and dydx its pathwise derivative
    w_i 1{B_T > K}.

    Parameters:
        `cfg` - the basket.

        `n` - number of samples.

        `seed` - master seed; chunk c of CHUNK_SIZE samples uses the
        substream (seed, c).

        `workers` - threads to sample on (results do not depend on it).
        Default: 1

        `paths` - paths simulated per input. With more than one, y and
        dydx are the path averages: still unbiased, with the variance
        divided by `paths`. Default: 1 (plain regression data)
    """
    if not isinstance(cfg, BasketConfig):
        raise _get_type_error("cfg", BasketConfig, cfg)
    return _sample(cfg, n, seed, workers, paths, cfg.box_lo, cfg.box_hi)


def sample_paths(
    cfg: BasketConfig, forwards: Sequence[float], n: int, seed: int,
    workers: int = 1) -> Dataset:
    """n independent paths from the same initial forwards."""
    if not isinstance(cfg, BasketConfig):
        raise _get_type_error("cfg", BasketConfig, cfg)
    forwards = _check_forwards(cfg, forwards)
    if forwards.ndim != 1:
        raise ShapeError("Expected a single vector of forwards.")
    return _sample(cfg, n, seed, workers, 1, forwards, forwards)


def terminal_increments(cfg: BasketConfig, n: int, seed: int) -> np.ndarray:
    """
    n draws of F_T - F_0 (shape n x m), generated the way the sampler
    generates them: Cholesky-correlated normals scaled by vol * sqrt(T).
    """
    if not isinstance(cfg, BasketConfig):
        raise _get_type_error("cfg", BasketConfig, cfg)
    if not isinstance(n, int):
        raise _get_type_error("n", int, n)
    if n < 1:
        raise ValueError("At least one draw must be made.")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return _increments(rng, cfg, _cholesky(cfg), (n,))


class AnalyticSurrogate:
    """The closed-form price exposed through the surrogate interface."""

    def __init__(self, cfg: BasketConfig) -> None:
        if not isinstance(cfg, BasketConfig):
            raise _get_type_error("cfg", BasketConfig, cfg)
        self._cfg = cfg

    @property
    def cfg(self) -> BasketConfig:
        """The basket priced."""
        return self._cfg

    def predict(self, x: Any) -> Union[float, np.ndarray]:
        """Analytic price at one input or a batch."""
        return analytic_price(self._cfg, x)

    def input_gradient(self, x: Any) -> np.ndarray:
        """Analytic Delta at one input or a batch."""
        return analytic_delta(self._cfg, x)
