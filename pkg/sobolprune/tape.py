"""
Reverse-mode algorithmic differentiation over a recorded computation.

A `Tape` is a flat, append-only list of nodes. Each node holds an array
whose elements are either all reals (`numpy.ndarray`) or all intervals
(`IntervalArray`); a scalar is a 0-d array. Operations are recorded by
calling the functions of this module (or the operators of `Variable`)
on variables of the tape. Called on plain values, the same functions
simply evaluate, which is how every backward rule below serves both the
numeric reverse sweep and the recorded one used for second derivatives.

Example:

    tape = record(lambda x: log(x * x), {"x": 2.0})
    gradient(tape)["x"]  # 1.0
"""
import math
import numbers
from dataclasses import dataclass, field
from typing import (
    Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence,
    Tuple, Union)

import numpy as np
from scipy.special import erfc, expit

from . import interval
from .exceptions import ShapeError, TapeError
from .interval import Interval, IntervalArray
from ._utils import _get_type_error


Value = Union[np.ndarray, IntervalArray]

INPUT = "input"
CONST = "const"


@dataclass(frozen=True)
class TapeNode:
    """One recorded elementary operation."""

    kind: str
    operands: Tuple[int, ...]
    value: Value
    attrs: Dict[str, Any] = field(default_factory=dict)


class _Op(NamedTuple):
    forward: Callable
    # (g, out, args, needs, attrs) -> one gradient (or None) per operand.
    backward: Optional[Callable]


_OPS: Dict[str, _Op] = {}


class Variable:
    """A value recorded on a tape. Arithmetic on variables is recorded."""

    # Makes numpy defer to the reflected operators of this class.
    __array_ufunc__ = None
    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int) -> None:
        self.tape = tape
        self.index = index

    def __repr__(self) -> str:
        node = self.node
        return f"Variable(kind={node.kind!r}, index={self.index})"

    @property
    def node(self) -> TapeNode:
        """The node this variable refers to."""
        return self.tape._nodes[self.index]

    @property
    def value(self) -> Value:
        """The primal value."""
        return self.node.value

    @property
    def shape(self) -> Tuple[int, ...]:
        """Shape of the primal value."""
        return _shape(self.value)

    @property
    def T(self) -> "Variable":
        """Recorded transpose."""
        return transpose(self)

    def __add__(self, other: Any) -> "Variable":
        return add(self, other)

    def __radd__(self, other: Any) -> "Variable":
        return add(other, self)

    def __sub__(self, other: Any) -> "Variable":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Variable":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Variable":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Variable":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Variable":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Variable":
        return div(other, self)

    def __matmul__(self, other: Any) -> "Variable":
        return matmul(self, other)

    def __rmatmul__(self, other: Any) -> "Variable":
        return matmul(other, self)

    def __neg__(self) -> "Variable":
        return neg(self)


class Tape:
    """
    An append-only record of a computation with named inputs and a
    single output.

    Tapes produced by `reverse_recorded` additionally expose `primals`
    (the replayed nodes of the original tape, by original index) and
    `adjoints` (input name -> recorded adjoint).
    """

    def __init__(self) -> None:
        self._nodes: List[TapeNode] = []
        self._inputs: Dict[str, int] = {}
        self._output: Optional[int] = None
        self.primals: List[Variable] = []
        self.adjoints: Dict[str, Variable] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def __repr__(self) -> str:
        return (
            f"Tape(nodes={len(self._nodes)}, inputs={list(self._inputs)}, "
            f"output={self._output})")

    @property
    def nodes(self) -> Tuple[TapeNode, ...]:
        """The recorded nodes in topological order."""
        return tuple(self._nodes)

    @property
    def inputs(self) -> Dict[str, int]:
        """Input name -> node index."""
        return dict(self._inputs)

    @property
    def output(self) -> Optional[int]:
        """Index of the output node (None until set)."""
        return self._output

    @property
    def output_value(self) -> Value:
        """Primal value of the output node."""
        return self._nodes[self._check_output()].value

    @property
    def is_interval(self) -> bool:
        """Whether the tape holds interval values."""
        return any(isinstance(node.value, IntervalArray) for node in self._nodes)

    def index_of(self, name: str) -> int:
        """Node index of the named input."""
        try:
            return self._inputs[name]
        except KeyError:
            raise TapeError(f"Tape has no input named {name!r}.") from None

    def input(self, name: str, value: Any) -> Variable:
        """Registers a named input and returns its variable."""
        if not isinstance(name, str):
            raise _get_type_error("name", str, name)
        if name in self._inputs:
            raise TapeError(f"Input {name!r} is already recorded.")
        variable = self._append(INPUT, (), _as_value(value), {"name": name})
        self._inputs[name] = variable.index
        return variable

    def const(self, value: Any) -> Variable:
        """Records a constant."""
        return self._append(CONST, (), _as_value(value), {})

    def set_output(self, variable: Any) -> None:
        """Marks the output of the tape."""
        if not isinstance(variable, Variable):
            variable = self.const(variable)
        if variable.tape is not self:
            raise TapeError("Output variable belongs to another tape.")
        self._output = variable.index

    def forward(self, values: Dict[str, Any]) -> Value:
        """
        Replays the recorded computation with new input values and
        returns the output value. The tape itself is not modified.
        """
        output = self._check_output()
        replayed: List[Value] = []
        for node in self._nodes:
            if node.kind == INPUT:
                name = node.attrs["name"]
                if name not in values:
                    raise TapeError(f"Missing value for input {name!r}.")
                replayed.append(_as_value(values[name]))
            elif node.kind == CONST:
                replayed.append(node.value)
            else:
                op = _get_op(node.kind)
                result = op.forward(
                    *(replayed[i] for i in node.operands), **node.attrs)
                replayed.append(_normalise(result))
        return replayed[output]

    def _check_output(self) -> int:
        if self._output is None:
            raise TapeError("Tape has no output.")
        return self._output

    def _lift(self, value: Any) -> int:
        if isinstance(value, Variable):
            return value.index
        return self.const(value).index

    def _append(
        self, kind: str, operands: Tuple[int, ...], value: Value,
        attrs: Dict[str, Any]) -> Variable:
        self._nodes.append(TapeNode(kind, operands, _normalise(value), attrs))
        return Variable(self, len(self._nodes) - 1)


def _as_value(value: Any) -> Value:
    # Lifts numbers, intervals and array-likes to tape values.
    if isinstance(value, Variable):
        raise TapeError("Expected a plain value, not a variable.")
    if isinstance(value, IntervalArray):
        return value
    if isinstance(value, Interval):
        return IntervalArray(value.lo, value.hi)
    if isinstance(value, (np.ndarray, numbers.Real)):
        return np.asarray(value, dtype=float)
    if isinstance(value, (list, tuple)):
        return np.asarray(value, dtype=float)
    raise _get_type_error(
        "value", (np.ndarray, IntervalArray, Interval, float), value)


def _normalise(value: Any) -> Value:
    if isinstance(value, IntervalArray):
        return value
    return np.asarray(value, dtype=float)


def _shape(value: Any) -> Tuple[int, ...]:
    if isinstance(value, (Variable, IntervalArray)):
        return value.shape
    return np.shape(value)


def _get_op(kind: str) -> _Op:
    try:
        return _OPS[kind]
    except KeyError:
        raise TapeError(f"Unsupported operation {kind!r}.") from None


def _apply(kind: str, *args: Any, **attrs: Any) -> Any:
    # Evaluates directly on plain values, records when any argument
    # is a variable.
    tape = None
    for arg in args:
        if isinstance(arg, Variable):
            if tape is None:
                tape = arg.tape
            elif arg.tape is not tape:
                raise TapeError("Cannot combine variables of different tapes.")
    op = _get_op(kind)
    if tape is None:
        return _normalise(op.forward(*(_as_value(a) for a in args), **attrs))
    operands = tuple(tape._lift(arg) for arg in args)
    value = op.forward(*(tape._nodes[i].value for i in operands), **attrs)
    return tape._append(kind, operands, value, attrs)


def _elementwise(real: Callable, interval_fn: Optional[Callable], kind: str):
    def forward(a: Value) -> Value:
        if isinstance(a, IntervalArray):
            if interval_fn is None:
                raise TapeError(f"Operation {kind!r} has no interval version.")
            return interval_fn(a)
        return real(a)
    return forward


def _sum_to_value(a: Value, shape: Tuple[int, ...]) -> Value:
    # Sums a broadcast result back down to `shape`.
    extra = len(_shape(a)) - len(shape)
    if extra < 0:
        raise ShapeError(f"Cannot reduce shape {_shape(a)} to {shape}.")
    if extra:
        a = a.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (have, want) in enumerate(zip(_shape(a), shape))
        if want == 1 and have != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    if _shape(a) != tuple(shape):
        raise ShapeError(f"Cannot reduce to shape {shape}.")
    return a


def _broadcast_value(a: Value, shape: Tuple[int, ...]) -> Value:
    if isinstance(a, IntervalArray):
        return a.broadcast_to(shape)
    return np.broadcast_to(a, shape).copy()


def _matmul_value(a: Value, b: Value) -> Value:
    if len(_shape(a)) != 2 or len(_shape(b)) != 2:
        raise ShapeError("Recorded matrix products need 2-d operands.")
    if _shape(a)[1] != _shape(b)[0]:
        raise ShapeError(f"Cannot multiply shapes {_shape(a)} and {_shape(b)}.")
    return a @ b


def _real_silu_grad(a: np.ndarray) -> np.ndarray:
    s = expit(a)
    return s * (1 + a * (1 - s))


def _real_silu_grad2(a: np.ndarray) -> np.ndarray:
    s = expit(a)
    return s * (1 - s) * (2 + a * (1 - 2 * s))


def _real_norm_cdf(a: np.ndarray) -> np.ndarray:
    return 0.5 * erfc(-a / math.sqrt(2))


def _real_norm_pdf(a: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)


def add(a: Any, b: Any) -> Any:
    """a + b (broadcasting)."""
    return _apply("add", a, b)


def sub(a: Any, b: Any) -> Any:
    """a - b (broadcasting)."""
    return _apply("sub", a, b)


def mul(a: Any, b: Any) -> Any:
    """a * b elementwise (broadcasting)."""
    return _apply("mul", a, b)


def div(a: Any, b: Any) -> Any:
    """a / b elementwise (broadcasting)."""
    return _apply("div", a, b)


def neg(a: Any) -> Any:
    """-a."""
    return _apply("neg", a)


def matmul(a: Any, b: Any) -> Any:
    """Matrix product of two 2-d operands."""
    return _apply("matmul", a, b)


def transpose(a: Any) -> Any:
    """Transpose of a 2-d operand."""
    return _apply("transpose", a)


def sum_to(a: Any, shape: Sequence[int]) -> Any:
    """Sums `a` down to a shape it was broadcast from."""
    shape = tuple(shape)
    if _shape(a) == shape:
        return a
    return _apply("sum_to", a, shape=shape)


def broadcast_to(a: Any, shape: Sequence[int]) -> Any:
    """Repeats `a` to fill `shape`."""
    shape = tuple(shape)
    if _shape(a) == shape:
        return a
    return _apply("broadcast_to", a, shape=shape)


def reduce_sum(a: Any) -> Any:
    """Sum of all elements (a 0-d result)."""
    return sum_to(a, ())


def exp(a: Any) -> Any:
    """Elementwise exponential."""
    return _apply("exp", a)


def log(a: Any) -> Any:
    """Elementwise natural logarithm."""
    return _apply("log", a)


def sin(a: Any) -> Any:
    """Elementwise sine."""
    return _apply("sin", a)


def cos(a: Any) -> Any:
    """Elementwise cosine."""
    return _apply("cos", a)


def sigmoid(a: Any) -> Any:
    """Elementwise logistic sigmoid."""
    return _apply("sigmoid", a)


def relu(a: Any) -> Any:
    """Elementwise max(a, 0)."""
    return _apply("relu", a)


def silu(a: Any) -> Any:
    """Elementwise a * sigmoid(a)."""
    return _apply("silu", a)


def relu_step(a: Any) -> Any:
    """Derivative of relu, with relu'(0) = 1."""
    return _apply("relu_step", a)


def silu_grad(a: Any) -> Any:
    """Derivative of silu."""
    return _apply("silu_grad", a)


def silu_grad2(a: Any) -> Any:
    """Second derivative of silu (not differentiable on the tape)."""
    return _apply("silu_grad2", a)


def norm_cdf(a: Any) -> Any:
    """Standard normal cumulative distribution function."""
    return _apply("norm_cdf", a)


def norm_pdf(a: Any) -> Any:
    """Standard normal density."""
    return _apply("norm_pdf", a)


def _register(kind: str, forward: Callable, backward: Optional[Callable]) -> None:
    _OPS[kind] = _Op(forward, backward)


def _add_backward(g, out, args, needs, attrs):
    a, b = args
    return (
        sum_to(g, _shape(a)) if needs[0] else None,
        sum_to(g, _shape(b)) if needs[1] else None)


def _sub_backward(g, out, args, needs, attrs):
    a, b = args
    return (
        sum_to(g, _shape(a)) if needs[0] else None,
        sum_to(neg(g), _shape(b)) if needs[1] else None)


def _mul_backward(g, out, args, needs, attrs):
    a, b = args
    return (
        sum_to(mul(g, b), _shape(a)) if needs[0] else None,
        sum_to(mul(g, a), _shape(b)) if needs[1] else None)


def _div_backward(g, out, args, needs, attrs):
    a, b = args
    return (
        sum_to(div(g, b), _shape(a)) if needs[0] else None,
        sum_to(neg(div(mul(g, a), mul(b, b))), _shape(b))
        if needs[1] else None)


def _matmul_backward(g, out, args, needs, attrs):
    a, b = args
    return (
        matmul(g, transpose(b)) if needs[0] else None,
        matmul(transpose(a), g) if needs[1] else None)


_register("add", lambda a, b: a + b, _add_backward)
_register("sub", lambda a, b: a - b, _sub_backward)
_register("mul", lambda a, b: a * b, _mul_backward)
_register("div", lambda a, b: a / b, _div_backward)
_register("neg", lambda a: -a, lambda g, out, args, needs, attrs: (neg(g),))
_register("matmul", _matmul_value, _matmul_backward)
_register(
    "transpose", lambda a: a.T,
    lambda g, out, args, needs, attrs: (transpose(g),))
_register(
    "sum_to", _sum_to_value,
    lambda g, out, args, needs, attrs: (broadcast_to(g, _shape(args[0])),))
_register(
    "broadcast_to", _broadcast_value,
    lambda g, out, args, needs, attrs: (sum_to(g, _shape(args[0])),))
_register(
    "exp", _elementwise(np.exp, interval.exp_iv, "exp"),
    lambda g, out, args, needs, attrs: (mul(g, out),))
_register(
    "log", _elementwise(np.log, interval.ln_iv, "log"),
    lambda g, out, args, needs, attrs: (div(g, args[0]),))
_register(
    "sin", _elementwise(np.sin, interval.sin_iv, "sin"),
    lambda g, out, args, needs, attrs: (mul(g, cos(args[0])),))
_register(
    "cos", _elementwise(np.cos, interval.cos_iv, "cos"),
    lambda g, out, args, needs, attrs: (neg(mul(g, sin(args[0]))),))
_register(
    "sigmoid", _elementwise(expit, interval.sigmoid_iv, "sigmoid"),
    lambda g, out, args, needs, attrs: (mul(g, mul(out, sub(1.0, out))),))
_register(
    "relu", _elementwise(lambda a: np.maximum(a, 0.0), interval.relu_iv, "relu"),
    lambda g, out, args, needs, attrs: (mul(g, relu_step(args[0])),))
_register(
    "silu", _elementwise(lambda a: a * expit(a), interval.silu_iv, "silu"),
    lambda g, out, args, needs, attrs: (mul(g, silu_grad(args[0])),))
# The derivative of a step is zero wherever it exists.
_register(
    "relu_step",
    _elementwise(
        lambda a: np.where(a >= 0, 1.0, 0.0), interval.relu_derivative_iv,
        "relu_step"),
    lambda g, out, args, needs, attrs: (None,))
_register(
    "silu_grad",
    _elementwise(_real_silu_grad, interval.silu_derivative_iv, "silu_grad"),
    lambda g, out, args, needs, attrs: (mul(g, silu_grad2(args[0])),))
_register("silu_grad2", _elementwise(_real_silu_grad2, None, "silu_grad2"), None)
_register(
    "norm_cdf", _elementwise(_real_norm_cdf, None, "norm_cdf"),
    lambda g, out, args, needs, attrs: (mul(g, norm_pdf(args[0])),))
_register(
    "norm_pdf", _elementwise(_real_norm_pdf, None, "norm_pdf"),
    lambda g, out, args, needs, attrs: (neg(mul(g, mul(args[0], out))),))


def record(func: Callable[..., Any], inputs: Dict[str, Any]) -> Tape:
    """
    Records `func` on a new tape.

    Parameters:
        `func` - called with one keyword argument per input, each a
        `Variable`. Must return a variable (or a plain value, which
        is recorded as a constant output).

        `inputs` - input name -> value (number, array, `Interval` or
        `IntervalArray`).

    Returns: the tape, with its output set.
    """
    if not isinstance(inputs, dict):
        raise _get_type_error("inputs", dict, inputs)
    tape = Tape()
    variables = {name: tape.input(name, value) for name, value in inputs.items()}
    tape.set_output(func(**variables))
    return tape


def _active_nodes(
    nodes: Sequence[TapeNode], wanted: Iterable[str]) -> List[bool]:
    # A node is active if its value depends on a wanted input.
    wanted = set(wanted)
    active = []
    for node in nodes:
        if node.kind == INPUT:
            active.append(node.attrs["name"] in wanted)
        else:
            active.append(any(active[i] for i in node.operands))
    return active


def _wanted_inputs(tape: Tape, wrt: Union[str, Iterable[str], None]) -> List[str]:
    if wrt is None:
        return list(tape.inputs)
    names = [wrt] if isinstance(wrt, str) else list(wrt)
    for name in names:
        tape.index_of(name)
    return names


def _seed_value(tape: Tape, seed: Any) -> Value:
    output_value = tape.output_value
    seed = _as_value(seed)
    output_shape = _shape(output_value)
    if _shape(seed) != output_shape:
        if _shape(seed) == () and int(np.prod(output_shape)) == 1:
            seed = broadcast_to(seed, output_shape)
        else:
            raise TapeError(
                f"Seed shape {_shape(seed)} does not match output shape "
                f"{output_shape}.")
    if isinstance(output_value, IntervalArray) and not isinstance(
        seed, IntervalArray):
        seed = IntervalArray(seed)
    return seed


def _sweep(
    nodes: Sequence[TapeNode], output: int, seed: Any, active: List[bool],
    primal: Callable[[int], Any]) -> List[Any]:
    # The adjoint sweep shared by `reverse` and `reverse_recorded`.
    adjoints: List[Any] = [None] * len(nodes)
    adjoints[output] = seed
    for index in range(output, -1, -1):
        g = adjoints[index]
        node = nodes[index]
        if g is None or node.kind in (INPUT, CONST):
            continue
        needs = tuple(active[i] for i in node.operands)
        if not any(needs):
            continue
        op = _get_op(node.kind)
        if op.backward is None:
            raise TapeError(
                f"Operation {node.kind!r} cannot be differentiated; "
                "derivatives beyond second order are not supported.")
        grads = op.backward(
            g, primal(index), [primal(i) for i in node.operands], needs,
            node.attrs)
        for operand, need, grad in zip(node.operands, needs, grads):
            if not need or grad is None:
                continue
            if adjoints[operand] is None:
                adjoints[operand] = grad
            else:
                adjoints[operand] = add(adjoints[operand], grad)
    return adjoints


def _zero_like(value: Value) -> Value:
    if isinstance(value, IntervalArray):
        return IntervalArray.zeros(value.shape)
    return np.zeros_like(value)


def reverse(
    tape: Tape, seed: Any = 1.0, wrt: Union[str, Iterable[str], None] = None
) -> List[Value]:
    """
    Runs the adjoint sweep.

    Parameters:
        `tape` - a tape with an output.

        `seed` - adjoint of the output; must have the output's shape
        (a scalar is accepted for a one-element output). Default 1.

        `wrt` - input name(s) whose adjoints are required (default all).
        Only nodes depending on these inputs are propagated.

    Returns: the adjoint of every node, indexed like `tape.nodes`.
    Nodes that do not influence the output get zero adjoints
    ([0, 0] on interval tapes).
    """
    if not isinstance(tape, Tape):
        raise _get_type_error("tape", Tape, tape)
    seed_value = _seed_value(tape, seed)
    nodes = tape.nodes
    active = _active_nodes(nodes, _wanted_inputs(tape, wrt))
    adjoints = _sweep(
        nodes, tape.output, seed_value, active, lambda i: nodes[i].value)
    return [
        _zero_like(node.value) if adjoint is None else _normalise(adjoint)
        for node, adjoint in zip(nodes, adjoints)]


def gradient(
    tape: Tape, seed: Any = 1.0, wrt: Union[str, Iterable[str], None] = None
) -> Dict[str, Value]:
    """Input name -> adjoint, after one reverse sweep."""
    names = _wanted_inputs(tape, wrt)
    adjoints = reverse(tape, seed, names)
    return {name: adjoints[tape.index_of(name)] for name in names}


def reverse_recorded(
    tape: Tape, seed: Any = 1.0, wrt: Union[str, Iterable[str], None] = None
) -> Tape:
    """
    Records the adjoint sweep of a real tape onto a new tape.

    The new tape replays the primal computation (available as
    `new_tape.primals[i]` for node i of `tape`) followed by the adjoint
    sweep; `new_tape.adjoints[name]` is the recorded adjoint of each
    requested input. If exactly one input is requested, it is also the
    output of the new tape. Reversing the new tape yields second
    derivatives, e.g. the parameter gradient of a loss on input
    gradients.

    Raises `TapeError` for interval tapes.
    """
    if not isinstance(tape, Tape):
        raise _get_type_error("tape", Tape, tape)
    if tape.is_interval:
        raise TapeError("Second-order interval adjoints are not supported.")
    seed_value = _seed_value(tape, seed)
    names = _wanted_inputs(tape, wrt)
    new_tape = Tape()
    replayed: List[Variable] = []
    for node in tape.nodes:
        if node.kind == INPUT:
            replayed.append(new_tape.input(node.attrs["name"], node.value))
        elif node.kind == CONST:
            replayed.append(new_tape.const(node.value))
        else:
            replayed.append(new_tape._append(
                node.kind, tuple(replayed[i].index for i in node.operands),
                node.value, node.attrs))
    nodes = tape.nodes
    active = _active_nodes(nodes, names)
    adjoints = _sweep(
        nodes, tape.output, new_tape.const(seed_value), active,
        lambda i: replayed[i])
    new_tape.primals = replayed
    for name in names:
        index = tape.index_of(name)
        adjoint = adjoints[index]
        if not isinstance(adjoint, Variable):
            adjoint = new_tape.const(_zero_like(nodes[index].value))
        new_tape.adjoints[name] = adjoint
    if len(names) == 1:
        new_tape.set_output(new_tape.adjoints[names[0]])
    return new_tape
