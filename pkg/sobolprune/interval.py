"""
This module provides closed-interval arithmetic, the basis of guaranteed
enclosures for network evaluations.

An `Interval` is a single closed interval [lo, hi]. An `IntervalArray`
is a numpy-backed array of intervals and is what the tape and the network
use internally. Both are built on the same bound kernels, so a scalar and
an array computation of the same operation always agree.

Enclosures are practical rather than verified: arithmetic uses the default
round-to-nearest mode and no outward rounding is applied.
"""
import math
import numbers
from typing import Any, Callable, Iterable, Iterator, Tuple, Union

import numpy as np
from scipy.special import expit

from .exceptions import IntervalError, ShapeError
from ._utils import _get_type_error


# SiLU attains its global minimum x* + 1 at x*, where 1 + x*(1 - sigmoid(x*)) = 0.
SILU_ARGMIN = -1.2784645427610738
SILU_MIN = SILU_ARGMIN + 1
# Global range of the SiLU derivative, rounded outwards.
SILU_GRAD_MIN = -0.09985
SILU_GRAD_MAX = 1.09985
SIGMOID_GRAD_MAX = 0.25

Bounds = Tuple[Any, Any]


def _silu(x):
    return x * expit(x)


def _add_bounds(alo, ahi, blo, bhi) -> Bounds:
    return alo + blo, ahi + bhi


def _sub_bounds(alo, ahi, blo, bhi) -> Bounds:
    return alo - bhi, ahi - blo


def _mul_bounds(alo, ahi, blo, bhi) -> Bounds:
    # Hull of the four endpoint products.
    p0, p1, p2, p3 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
    return (
        np.minimum(np.minimum(p0, p1), np.minimum(p2, p3)),
        np.maximum(np.maximum(p0, p1), np.maximum(p2, p3)))


def _div_bounds(alo, ahi, blo, bhi) -> Bounds:
    if np.any((np.asarray(blo) <= 0) & (np.asarray(bhi) >= 0)):
        raise IntervalError("Cannot divide by an interval containing zero.")
    q0, q1, q2, q3 = alo / blo, alo / bhi, ahi / blo, ahi / bhi
    return (
        np.minimum(np.minimum(q0, q1), np.minimum(q2, q3)),
        np.maximum(np.maximum(q0, q1), np.maximum(q2, q3)))


def _neg_bounds(lo, hi) -> Bounds:
    return -hi, -lo


def _relu_bounds(lo, hi) -> Bounds:
    return np.maximum(lo, 0.0), np.maximum(hi, 0.0)


def _sigmoid_bounds(lo, hi) -> Bounds:
    return expit(lo), expit(hi)


def _exp_bounds(lo, hi) -> Bounds:
    return np.exp(lo), np.exp(hi)


def _ln_bounds(lo, hi) -> Bounds:
    if np.any(np.asarray(lo) <= 0):
        raise IntervalError("Logarithm requires a strictly positive interval.")
    return np.log(lo), np.log(hi)


def _silu_bounds(lo, hi) -> Bounds:
    # SiLU falls left of its minimiser and rises right of it,
    # so the range is spanned by the endpoints plus the minimum if inside.
    vlo, vhi = _silu(lo), _silu(hi)
    low, high = np.minimum(vlo, vhi), np.maximum(vlo, vhi)
    inside = (np.asarray(lo) <= SILU_ARGMIN) & (np.asarray(hi) >= SILU_ARGMIN)
    return np.where(inside, SILU_MIN, low), high


def _periodic_bounds(
    lo, hi, func: Callable, peak: float, trough: float) -> Bounds:
    # Range of a 2*pi periodic function with maximum 1 at `peak`
    # and minimum -1 at `trough` (modulo 2*pi).
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    flo, fhi = func(lo), func(hi)
    low, high = np.minimum(flo, fhi), np.maximum(flo, fhi)
    period = 2 * math.pi
    next_peak = np.ceil((lo - peak) / period) * period + peak
    next_trough = np.ceil((lo - trough) / period) * period + trough
    high = np.where(next_peak <= hi, 1.0, high)
    low = np.where(next_trough <= hi, -1.0, low)
    return low, high


def _cos_bounds(lo, hi) -> Bounds:
    return _periodic_bounds(lo, hi, np.cos, 0.0, math.pi)


def _sin_bounds(lo, hi) -> Bounds:
    return _periodic_bounds(lo, hi, np.sin, math.pi / 2, -math.pi / 2)


def _intersect_bounds(lo, hi, floor: float, ceiling: float) -> Bounds:
    return np.maximum(lo, floor), np.minimum(hi, ceiling)


def _relu_derivative_bounds(lo, hi) -> Bounds:
    # [1, 1] on nonnegative inputs (relu'(0) = 1), [0, 0] on negative inputs
    # and the subderivative hull [0, 1] across the kink.
    return (
        np.where(np.asarray(lo) >= 0, 1.0, 0.0),
        np.where(np.asarray(hi) >= 0, 1.0, 0.0))


def _sigmoid_derivative_bounds(lo, hi) -> Bounds:
    slo, shi = _sigmoid_bounds(lo, hi)
    dlo, dhi = _mul_bounds(slo, shi, 1 - shi, 1 - slo)
    return _intersect_bounds(dlo, dhi, 0.0, SIGMOID_GRAD_MAX)


def _silu_derivative_bounds(lo, hi) -> Bounds:
    # Natural extension of s(k) * (1 + k * (1 - s(k))), then clipped
    # to the known global range of the SiLU derivative.
    slo, shi = _sigmoid_bounds(lo, hi)
    tlo, thi = _mul_bounds(lo, hi, 1 - shi, 1 - slo)
    dlo, dhi = _mul_bounds(slo, shi, 1 + tlo, 1 + thi)
    return _intersect_bounds(dlo, dhi, SILU_GRAD_MIN, SILU_GRAD_MAX)


def _as_bound(name: str, value: Any) -> float:
    # Converts a bound to float, accepting 0-d numpy arrays from the kernels.
    if isinstance(value, np.ndarray) and value.ndim == 0:
        value = value.item()
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise _get_type_error(name, (int, float), value)
    return float(value)


class Interval:
    """
    A closed real interval [lo, hi].

    Intervals are immutable. The degenerate interval [p, p] is legal
    everywhere and represents the point p.
    """

    __slots__ = ("_lo", "_hi")

    def __init__(
        self, lo: Union[int, float], hi: Union[int, float, None] = None
    ) -> None:
        """
        Creates a new `Interval` object.

        Parameters:
            `lo` - the lower bound.

            `hi` - the upper bound (default `lo`, a point interval).
            Must not be less than the lower bound.

        Raises `IntervalError` for NaN bounds or lo > hi.
        """
        lo = _as_bound("lo", lo)
        hi = lo if hi is None else _as_bound("hi", hi)
        if math.isnan(lo) or math.isnan(hi):
            raise IntervalError("Interval bounds must not be NaN.")
        if lo > hi:
            raise IntervalError(
                f"Lower bound {lo} must not be greater than upper bound {hi}.")
        self._lo = lo
        self._hi = hi

    def __repr__(self) -> str:
        return f"Interval({self._lo!r}, {self._hi!r})"

    def __str__(self) -> str:
        return f"[{self._lo:.6g}, {self._hi:.6g}]"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Interval):
            return NotImplemented
        return self._lo == other._lo and self._hi == other._hi

    def __hash__(self) -> int:
        return hash((self._lo, self._hi))

    def __contains__(self, point: Union[int, float]) -> bool:
        return self._lo <= point <= self._hi

    @property
    def lo(self) -> float:
        """Lower bound."""
        return self._lo

    @property
    def hi(self) -> float:
        """Upper bound."""
        return self._hi

    @property
    def width(self) -> float:
        """hi - lo."""
        return self._hi - self._lo

    @property
    def midpoint(self) -> float:
        """(lo + hi) / 2."""
        return (self._lo + self._hi) / 2

    @property
    def max_abs(self) -> float:
        """Largest absolute value attained in the interval."""
        return max(abs(self._lo), abs(self._hi))

    @staticmethod
    def _coerce(other: Any) -> Union[Bounds, None]:
        if isinstance(other, Interval):
            return other.lo, other.hi
        if isinstance(other, numbers.Real) and not isinstance(other, bool):
            return float(other), float(other)
        return None

    def _binary(self, other: Any, kernel: Callable, reflected: bool = False):
        bounds = Interval._coerce(other)
        if bounds is None:
            return NotImplemented
        if reflected:
            return Interval(*kernel(*bounds, self._lo, self._hi))
        return Interval(*kernel(self._lo, self._hi, *bounds))

    def __add__(self, other: Any) -> "Interval":
        return self._binary(other, _add_bounds)

    def __radd__(self, other: Any) -> "Interval":
        return self._binary(other, _add_bounds, True)

    def __sub__(self, other: Any) -> "Interval":
        return self._binary(other, _sub_bounds)

    def __rsub__(self, other: Any) -> "Interval":
        return self._binary(other, _sub_bounds, True)

    def __mul__(self, other: Any) -> "Interval":
        return self._binary(other, _mul_bounds)

    def __rmul__(self, other: Any) -> "Interval":
        return self._binary(other, _mul_bounds, True)

    def __truediv__(self, other: Any) -> "Interval":
        return self._binary(other, _div_bounds)

    def __rtruediv__(self, other: Any) -> "Interval":
        return self._binary(other, _div_bounds, True)

    def __neg__(self) -> "Interval":
        return Interval(*_neg_bounds(self._lo, self._hi))


class IntervalArray:
    """
    An n-dimensional array of closed intervals, stored as two float64
    arrays of lower and upper bounds.

    numpy arrays combine with interval arrays on either side of an
    operator; the result is always an interval array.
    """

    # Makes numpy defer to the reflected operators of this class.
    __array_ufunc__ = None
    __slots__ = ("_lo", "_hi")

    def __init__(self, lo: Any, hi: Any = None, check: bool = True) -> None:
        """
        Creates a new `IntervalArray` object.

        Parameters:
            `lo` - array-like of lower bounds.

            `hi` - array-like of upper bounds of the same shape
            (default `lo`, an array of point intervals).

            `check` - validate that no bound is NaN and lo <= hi
            (default True).
        """
        lo = np.array(lo, dtype=float)
        hi = lo.copy() if hi is None else np.array(hi, dtype=float)
        if lo.shape != hi.shape:
            raise ShapeError(
                f"Bound shapes {lo.shape} and {hi.shape} do not agree.")
        if check:
            if np.isnan(lo).any() or np.isnan(hi).any():
                raise IntervalError("Interval bounds must not be NaN.")
            if (lo > hi).any():
                raise IntervalError(
                    "Lower bounds must not be greater than upper bounds.")
        self._lo = lo
        self._hi = hi

    @classmethod
    def from_intervals(cls, intervals: Iterable[Interval]) -> "IntervalArray":
        """Builds a 1-d interval array from `Interval` objects."""
        intervals = list(intervals)
        for interval in intervals:
            if not isinstance(interval, Interval):
                raise _get_type_error("intervals", Interval, interval)
        return cls(
            [interval.lo for interval in intervals],
            [interval.hi for interval in intervals])

    @classmethod
    def zeros(cls, shape: Tuple[int, ...]) -> "IntervalArray":
        """An array of [0, 0] intervals."""
        return cls(np.zeros(shape), check=False)

    def __repr__(self) -> str:
        return f"IntervalArray(lo={self._lo!r}, hi={self._hi!r})"

    @property
    def lo(self) -> np.ndarray:
        """Lower bounds."""
        return self._lo

    @property
    def hi(self) -> np.ndarray:
        """Upper bounds."""
        return self._hi

    @property
    def shape(self) -> Tuple[int, ...]:
        """Shape of the array."""
        return self._lo.shape

    @property
    def ndim(self) -> int:
        """Number of dimensions."""
        return self._lo.ndim

    @property
    def size(self) -> int:
        """Number of intervals."""
        return self._lo.size

    @property
    def width(self) -> np.ndarray:
        """Elementwise hi - lo."""
        return self._hi - self._lo

    @property
    def midpoint(self) -> np.ndarray:
        """Elementwise (lo + hi) / 2."""
        return (self._lo + self._hi) / 2

    @property
    def max_abs(self) -> np.ndarray:
        """Elementwise largest absolute value."""
        return np.maximum(np.abs(self._lo), np.abs(self._hi))

    @property
    def T(self) -> "IntervalArray":
        """Transposed array."""
        return self.transpose()

    def transpose(self) -> "IntervalArray":
        """Reverses the axes."""
        return IntervalArray(self._lo.T, self._hi.T, check=False)

    def reshape(self, *shape: Any) -> "IntervalArray":
        """Same intervals, new shape."""
        return IntervalArray(
            self._lo.reshape(*shape), self._hi.reshape(*shape), check=False)

    def broadcast_to(self, shape: Tuple[int, ...]) -> "IntervalArray":
        """Repeats the intervals to fill `shape`."""
        return IntervalArray(
            np.broadcast_to(self._lo, shape).copy(),
            np.broadcast_to(self._hi, shape).copy(), check=False)

    def sum(
        self, axis: Union[int, Tuple[int, ...], None] = None,
        keepdims: bool = False) -> "IntervalArray":
        """Interval sum along the given axes."""
        return IntervalArray(
            self._lo.sum(axis=axis, keepdims=keepdims),
            self._hi.sum(axis=axis, keepdims=keepdims), check=False)

    def contains(self, points: Any) -> np.ndarray:
        """Elementwise lo <= p <= hi."""
        points = np.asarray(points, dtype=float)
        return (self._lo <= points) & (points <= self._hi)

    def to_list(self) -> list:
        """Flattened list of `Interval` objects."""
        return [
            Interval(lo, hi)
            for lo, hi in zip(self._lo.ravel(), self._hi.ravel())]

    def __len__(self) -> int:
        return len(self._lo)

    def __getitem__(self, key: Any) -> Union[Interval, "IntervalArray"]:
        lo, hi = self._lo[key], self._hi[key]
        if np.ndim(lo) == 0:
            return Interval(lo, hi)
        return IntervalArray(lo, hi, check=False)

    def __iter__(self) -> Iterator[Union[Interval, "IntervalArray"]]:
        for i in range(len(self)):
            yield self[i]

    @staticmethod
    def _coerce(other: Any) -> Union[Bounds, None]:
        if isinstance(other, IntervalArray):
            return other.lo, other.hi
        if isinstance(other, Interval):
            return other.lo, other.hi
        if isinstance(other, (np.ndarray, numbers.Real)):
            other = np.asarray(other, dtype=float)
            return other, other
        return None

    def _binary(self, other: Any, kernel: Callable, reflected: bool = False):
        bounds = IntervalArray._coerce(other)
        if bounds is None:
            return NotImplemented
        if reflected:
            lo, hi = kernel(*bounds, self._lo, self._hi)
        else:
            lo, hi = kernel(self._lo, self._hi, *bounds)
        return IntervalArray(lo, hi, check=False)

    def __add__(self, other: Any) -> "IntervalArray":
        return self._binary(other, _add_bounds)

    def __radd__(self, other: Any) -> "IntervalArray":
        return self._binary(other, _add_bounds, True)

    def __sub__(self, other: Any) -> "IntervalArray":
        return self._binary(other, _sub_bounds)

    def __rsub__(self, other: Any) -> "IntervalArray":
        return self._binary(other, _sub_bounds, True)

    def __mul__(self, other: Any) -> "IntervalArray":
        return self._binary(other, _mul_bounds)

    def __rmul__(self, other: Any) -> "IntervalArray":
        return self._binary(other, _mul_bounds, True)

    def __truediv__(self, other: Any) -> "IntervalArray":
        return self._binary(other, _div_bounds)

    def __rtruediv__(self, other: Any) -> "IntervalArray":
        return self._binary(other, _div_bounds, True)

    def __neg__(self) -> "IntervalArray":
        return IntervalArray(*_neg_bounds(self._lo, self._hi), check=False)

    def __matmul__(self, other: Any) -> "IntervalArray":
        if isinstance(other, IntervalArray):
            return IntervalArray(
                *_interval_matmul(self._lo, self._hi, other.lo, other.hi),
                check=False)
        if isinstance(other, np.ndarray):
            positive, negative = np.maximum(other, 0), np.minimum(other, 0)
            return IntervalArray(
                self._lo @ positive + self._hi @ negative,
                self._hi @ positive + self._lo @ negative, check=False)
        return NotImplemented

    def __rmatmul__(self, other: Any) -> "IntervalArray":
        if isinstance(other, np.ndarray):
            positive, negative = np.maximum(other, 0), np.minimum(other, 0)
            return IntervalArray(
                positive @ self._lo + negative @ self._hi,
                positive @ self._hi + negative @ self._lo, check=False)
        return NotImplemented


def _interval_matmul(alo, ahi, blo, bhi) -> Bounds:
    # Matrix product of two interval arrays (1-d or 2-d operands).
    squeeze = []
    if alo.ndim == 1:
        alo, ahi = alo[None, :], ahi[None, :]
        squeeze.append(0)
    if blo.ndim == 1:
        blo, bhi = blo[:, None], bhi[:, None]
        squeeze.append(-1)
    if alo.shape[-1] != blo.shape[0]:
        raise ShapeError(
            f"Cannot multiply shapes {alo.shape} and {blo.shape}.")
    plo, phi = _mul_bounds(
        alo[:, :, None], ahi[:, :, None], blo[None, :, :], bhi[None, :, :])
    lo, hi = plo.sum(axis=1), phi.sum(axis=1)
    for axis in sorted(squeeze, reverse=True):
        lo, hi = np.squeeze(lo, axis=axis), np.squeeze(hi, axis=axis)
    return lo, hi


IntervalLike = Union[Interval, IntervalArray]


def _check_interval(name: str, value: Any) -> None:
    if not isinstance(value, (Interval, IntervalArray)):
        raise _get_type_error(name, (Interval, IntervalArray), value)


def _unary(a: IntervalLike, kernel: Callable) -> IntervalLike:
    _check_interval("a", a)
    if isinstance(a, Interval):
        return Interval(*kernel(a.lo, a.hi))
    return IntervalArray(*kernel(a.lo, a.hi), check=False)


def add(a: IntervalLike, b: IntervalLike) -> IntervalLike:
    """[a.lo + b.lo, a.hi + b.hi]."""
    _check_interval("a", a)
    return a + b


def sub(a: IntervalLike, b: IntervalLike) -> IntervalLike:
    """[a.lo - b.hi, a.hi - b.lo]."""
    _check_interval("a", a)
    return a - b


def mul(a: IntervalLike, b: IntervalLike) -> IntervalLike:
    """Hull of the four endpoint products."""
    _check_interval("a", a)
    return a * b


def div(a: IntervalLike, b: IntervalLike) -> IntervalLike:
    """
    Interval quotient. Raises `IntervalError` if the divisor
    contains zero.
    """
    _check_interval("a", a)
    return a / b


def neg(a: IntervalLike) -> IntervalLike:
    """[-hi, -lo]."""
    _check_interval("a", a)
    return -a


def relu_iv(a: IntervalLike) -> IntervalLike:
    """[max(lo, 0), max(hi, 0)]."""
    return _unary(a, _relu_bounds)


def sigmoid_iv(a: IntervalLike) -> IntervalLike:
    """[sigmoid(lo), sigmoid(hi)], exact since the sigmoid is monotone."""
    return _unary(a, _sigmoid_bounds)


def silu_iv(a: IntervalLike) -> IntervalLike:
    """Exact range of x * sigmoid(x) over the interval."""
    return _unary(a, _silu_bounds)


def exp_iv(a: IntervalLike) -> IntervalLike:
    """[exp(lo), exp(hi)]."""
    return _unary(a, _exp_bounds)


def ln_iv(a: IntervalLike) -> IntervalLike:
    """[ln(lo), ln(hi)]. Raises `IntervalError` unless lo > 0."""
    return _unary(a, _ln_bounds)


def cos_iv(a: IntervalLike) -> IntervalLike:
    """Exact range of the cosine over the interval."""
    return _unary(a, _cos_bounds)


def sin_iv(a: IntervalLike) -> IntervalLike:
    """Exact range of the sine over the interval."""
    return _unary(a, _sin_bounds)


def relu_derivative_iv(a: IntervalLike) -> IntervalLike:
    """Enclosure of relu' over the interval, with relu'(0) = 1."""
    return _unary(a, _relu_derivative_bounds)


def sigmoid_derivative_iv(a: IntervalLike) -> IntervalLike:
    """Enclosure of sigmoid' over the interval."""
    return _unary(a, _sigmoid_derivative_bounds)


def silu_derivative_iv(a: IntervalLike) -> IntervalLike:
    """Enclosure of silu' over the interval."""
    return _unary(a, _silu_derivative_bounds)


def width(a: Interval) -> float:
    """hi - lo."""
    _check_interval("a", a)
    return a.width


def midpoint(a: Interval) -> float:
    """(lo + hi) / 2."""
    _check_interval("a", a)
    return a.midpoint


def max_abs(a: Interval) -> float:
    """max(|lo|, |hi|)."""
    _check_interval("a", a)
    return a.max_abs


def hull(points: Iterable[Union[int, float]]) -> Interval:
    """Smallest interval containing every point."""
    points = [_as_bound("points", point) for point in points]
    if not points:
        raise IntervalError("Cannot take the hull of no points.")
    return Interval(min(points), max(points))


def contains(a: Interval, point: Union[int, float]) -> bool:
    """lo <= point <= hi."""
    if not isinstance(a, Interval):
        raise _get_type_error("a", Interval, a)
    return point in a
