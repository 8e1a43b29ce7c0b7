"""
The MLP surrogate. Models are evaluated on reals or intervals with the
same code path (the functions of `tape`), so the interval pass of the
significance analysis and the real pass of training can never drift
apart. Structural edits (node pruning with bias compensation, layer
removal) return new models; the argument is never modified.
"""
import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tape
from .exceptions import ModelFormatError, PruneError, ShapeError
from .interval import Interval, IntervalArray
from ._utils import _get_type_error


ACTIVATIONS = ("relu", "silu", "identity")
DEFAULT_ACTIVATION = "silu"
MODEL_FORMAT_VERSION = 1

_ACTIVATION_FUNCTIONS = {
    "relu": tape.relu,
    "silu": tape.silu,
    "identity": lambda a: a,
}

Layer = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class Scaling:
    """
    Input and output standardisation. The network proper sees
    (x - x_mean) / x_std and predicts (y - y_mean) / y_std.
    """

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def __post_init__(self) -> None:
        x_mean = np.array(self.x_mean, dtype=float).reshape(-1)
        x_std = np.array(self.x_std, dtype=float).reshape(-1)
        if x_mean.shape != x_std.shape:
            raise ShapeError("Input mean and scale must have the same length.")
        if not (np.isfinite(x_std).all() and (x_std > 0).all()):
            raise ValueError("Input scales must be positive and finite.")
        if not (math.isfinite(self.y_std) and self.y_std > 0):
            raise ValueError("Output scale must be positive and finite.")
        if not (np.isfinite(x_mean).all() and math.isfinite(self.y_mean)):
            raise ValueError("Means must be finite.")
        object.__setattr__(self, "x_mean", x_mean)
        object.__setattr__(self, "x_std", x_std)
        object.__setattr__(self, "y_mean", float(self.y_mean))
        object.__setattr__(self, "y_std", float(self.y_std))

    @staticmethod
    def identity(input_dim: int) -> "Scaling":
        """No-op scaling."""
        return Scaling(np.zeros(input_dim), np.ones(input_dim), 0.0, 1.0)


class MlpModel:
    """
    A fully connected network with one scalar output. Every hidden layer
    applies the same activation; the output layer is affine.
    """

    def __init__(
        self, layers: Sequence[Tuple[Any, Any]],
        activation: str = DEFAULT_ACTIVATION,
        scaling: Optional[Scaling] = None,
        requires_retraining: bool = False) -> None:
        """
        Creates a new `MlpModel` object.

        Parameters:
            `layers` - sequence of (weights, bias) pairs, weights of shape
            (out, in) and bias of shape (out,). The last pair is the output
            layer and must have one row.

            `activation` - 'relu', 'silu' or 'identity' (hidden layers).
            Default: 'silu'

            `scaling` - optional `Scaling` wrapped around the network.

            `requires_retraining` - marks a model whose structure was
            edited without compensation (after layer removal).
        """
        if activation not in ACTIVATIONS:
            raise ValueError(
                f"Activation must be one of {', '.join(ACTIVATIONS)}.")
        if scaling is not None and not isinstance(scaling, Scaling):
            raise _get_type_error("scaling", (Scaling, None), scaling)
        self._layers = _check_layers(layers)
        if scaling is not None and scaling.x_mean.shape[0] != self.input_dim:
            raise ShapeError("Scaling does not match the input width.")
        self._activation = activation
        self._scaling = scaling
        self._requires_retraining = bool(requires_retraining)

    def __repr__(self) -> str:
        widths = "-".join(str(width) for width in self.widths)
        return f"MlpModel({widths}, activation={self._activation!r})"

    @property
    def layers(self) -> List[Layer]:
        """Copies of the (weights, bias) pairs."""
        return [(w.copy(), b.copy()) for w, b in self._layers]

    @property
    def activation(self) -> str:
        """Hidden layer activation."""
        return self._activation

    @property
    def scaling(self) -> Optional[Scaling]:
        """Input/output standardisation, if any."""
        return self._scaling

    @property
    def requires_retraining(self) -> bool:
        """Whether the model was edited in a way only retraining repairs."""
        return self._requires_retraining

    @property
    def input_dim(self) -> int:
        """Number of inputs."""
        return self._layers[0][0].shape[1]

    @property
    def n_hidden(self) -> int:
        """Number of hidden layers."""
        return len(self._layers) - 1

    @property
    def hidden_widths(self) -> List[int]:
        """Node counts of the hidden layers."""
        return [w.shape[0] for w, _ in self._layers[:-1]]

    @property
    def widths(self) -> List[int]:
        """Input width, hidden widths, output width."""
        return [self.input_dim] + [w.shape[0] for w, _ in self._layers]

    def replace(self, **changes: Any) -> "MlpModel":
        """A new model with some constructor arguments changed."""
        arguments = {
            "layers": self._layers,
            "activation": self._activation,
            "scaling": self._scaling,
            "requires_retraining": self._requires_retraining,
        }
        arguments.update(changes)
        return MlpModel(**arguments)

    def predict(self, x: Any) -> Union[float, np.ndarray]:
        """Same as `forward(self, x)`."""
        return forward(self, x)

    def input_gradient(self, x: Any) -> np.ndarray:
        """Same as `input_gradient(self, x)`."""
        return input_gradient(self, x)


def _check_layers(layers: Sequence[Tuple[Any, Any]]) -> List[Layer]:
    if not isinstance(layers, (list, tuple)):
        raise _get_type_error("layers", (list, tuple), layers)
    if len(layers) < 2:
        raise ShapeError("A model needs at least one hidden layer.")
    checked = []
    for i, layer in enumerate(layers):
        try:
            weights, bias = layer
        except (TypeError, ValueError):
            raise ShapeError(
                f"Layer {i} must be a (weights, bias) pair.") from None
        weights = np.array(weights, dtype=float)
        bias = np.array(bias, dtype=float)
        if weights.ndim != 2 or bias.ndim != 1:
            raise ShapeError(f"Layer {i} needs 2-d weights and a 1-d bias.")
        if weights.shape[0] != bias.shape[0] or 0 in weights.shape:
            raise ShapeError(f"Layer {i} weights and bias do not agree.")
        if checked and checked[-1][0].shape[0] != weights.shape[1]:
            raise ShapeError(
                f"Layer {i} expects {weights.shape[1]} inputs but the "
                f"previous layer has {checked[-1][0].shape[0]} nodes.")
        if not (np.isfinite(weights).all() and np.isfinite(bias).all()):
            raise ValueError(f"Layer {i} has non-finite parameters.")
        checked.append((weights, bias))
    if checked[-1][0].shape[0] != 1:
        raise ShapeError("The output layer must have exactly one node.")
    return checked


def init_model(
    input_dim: int, hidden_widths: Sequence[int],
    activation: str = DEFAULT_ACTIVATION, seed: int = 0) -> MlpModel:
    """
    A randomly initialised model: weights uniform in
    [-sqrt(6 / fan_in), sqrt(6 / fan_in)], zero biases.
    """
    if not isinstance(input_dim, int):
        raise _get_type_error("input_dim", int, input_dim)
    if not hidden_widths:
        raise ShapeError("A model needs at least one hidden layer.")
    if input_dim < 1 or any(width < 1 for width in hidden_widths):
        raise ShapeError("Layer widths must be positive.")
    rng = np.random.default_rng(seed)
    widths = [input_dim] + list(hidden_widths) + [1]
    layers = []
    for fan_in, fan_out in zip(widths, widths[1:]):
        bound = math.sqrt(6 / fan_in)
        layers.append(
            (rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
    return MlpModel(layers, activation)


def parameter_names(model: MlpModel) -> List[str]:
    """Input names used for the parameters on recorded tapes."""
    names = []
    for i in range(len(model._layers)):
        names.extend((f"w{i}", f"b{i}"))
    return names


def parameters(model: MlpModel) -> List[np.ndarray]:
    """Copies of all parameters: [w0, b0, w1, b1, ...]."""
    return [array.copy() for layer in model._layers for array in layer]


def with_parameters(model: MlpModel, params: Sequence[np.ndarray]) -> MlpModel:
    """The same architecture with new parameters (as from `parameters`)."""
    if len(params) != 2 * len(model._layers):
        raise ShapeError("Parameter count does not match the model.")
    layers = list(zip(params[0::2], params[1::2]))
    for (w, b), (old_w, old_b) in zip(layers, model._layers):
        if np.shape(w) != old_w.shape or np.shape(b) != old_b.shape:
            raise ShapeError("Parameter shapes do not match the model.")
    return model.replace(layers=layers)


def parameter_count(model: MlpModel) -> int:
    """Number of weights and biases."""
    return sum(w.size + b.size for w, b in model._layers)


def fingerprint(model: MlpModel) -> str:
    """Hex digest identifying the model's parameters and structure."""
    digest = hashlib.sha256(model._activation.encode("utf8"))
    for w, b in model._layers:
        digest.update(repr(w.shape).encode("utf8"))
        digest.update(w.tobytes())
        digest.update(b.tobytes())
    if model._scaling is not None:
        for array in (
            model._scaling.x_mean, model._scaling.x_std,
            np.array([model._scaling.y_mean, model._scaling.y_std])):
            digest.update(array.tobytes())
    return digest.hexdigest()


def _graph(
    model: MlpModel, x: Any, layers: Optional[Sequence[Tuple[Any, Any]]] = None
) -> Tuple[Any, List[Any], List[Any]]:
    # Evaluates (or records) the network on a batch x of shape (n, m).
    # Returns the output (n, 1) and per hidden layer pre/post-activations.
    layers = model._layers if layers is None else layers
    activation = _ACTIVATION_FUNCTIONS[model._activation]
    scaling = model._scaling
    h = x
    if scaling is not None:
        h = tape.div(tape.sub(h, scaling.x_mean), scaling.x_std)
    pre, post = [], []
    for w, b in layers[:-1]:
        k = tape.add(tape.matmul(h, tape.transpose(w)), b)
        h = activation(k)
        pre.append(k)
        post.append(h)
    w, b = layers[-1]
    out = tape.add(tape.matmul(h, tape.transpose(w)), b)
    if scaling is not None:
        out = tape.add(tape.mul(out, scaling.y_std), scaling.y_mean)
    return out, pre, post


def _as_batch(model: MlpModel, x: Any) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ShapeError(
            f"Expected inputs of width {model.input_dim}, got shape {x.shape}.")
    return batch, single


def forward(model: MlpModel, x: Any) -> Union[float, np.ndarray]:
    """
    Evaluates the model.

    Parameters:
        `model` - the network.

        `x` - one input vector (length = input width) or a batch of
        shape (n, input width).

    Returns: a float for one input, an array of n predictions for a batch.
    """
    if not isinstance(model, MlpModel):
        raise _get_type_error("model", MlpModel, model)
    batch, single = _as_batch(model, x)
    out = _graph(model, batch)[0][:, 0]
    return float(out[0]) if single else out


def input_gradient(model: MlpModel, x: Any) -> np.ndarray:
    """
    Gradient of the prediction with respect to the inputs, by reverse
    AD. Accepts one input (returns a vector) or a batch (returns one
    row per input).
    """
    if not isinstance(model, MlpModel):
        raise _get_type_error("model", MlpModel, model)
    batch, single = _as_batch(model, x)
    # Rows are independent, so the gradient of the sum is row-wise.
    recorded, _ = record_forward(model, batch)
    gradient = tape.gradient(recorded, wrt="x")["x"]
    return gradient[0] if single else gradient


def record_forward(
    model: MlpModel, x: Any, trainable: bool = False
) -> Tuple[tape.Tape, tape.Variable]:
    """
    Records the network on the batch x.

    Parameters:
        `model` - the network.

        `x` - batch of inputs, shape (n, input width).

        `trainable` - also record every parameter as a named input
        (see `parameter_names`).

    Returns: the tape, whose output is the sum of the predictions (so
    its input adjoint is the row-wise input gradient), and the variable
    holding the (n, 1) predictions.
    """
    batch, _ = _as_batch(model, x)
    inputs: Dict[str, Any] = {"x": batch}
    if trainable:
        inputs.update(zip(parameter_names(model), parameters(model)))
    recorded: Dict[str, tape.Variable] = {}

    def func(x, **params):
        layers = None
        if trainable:
            layers = [
                (params[f"w{i}"], params[f"b{i}"])
                for i in range(len(model._layers))]
        recorded["predictions"] = _graph(model, x, layers)[0]
        return tape.reduce_sum(recorded["predictions"])

    return tape.record(func, inputs), recorded["predictions"]


@dataclass(frozen=True)
class NodeEnclosures:
    """
    Interval enclosures of every hidden node over an input box: the
    pre-activation [k], the post-activation [n] and the adjoint [n_bar]
    of the output with respect to the node. Element l of each list
    holds the 1-d `IntervalArray` of hidden layer l.
    """

    pre: List[IntervalArray]
    post: List[IntervalArray]
    adjoint: List[IntervalArray]
    output: Interval
    fingerprint: str

    @property
    def n_layers(self) -> int:
        """Number of hidden layers covered."""
        return len(self.post)


def _as_box(model: MlpModel, box: Any) -> IntervalArray:
    if isinstance(box, IntervalArray):
        intervals = box
    else:
        box = list(box)
        for i, item in enumerate(box):
            if isinstance(item, Interval):
                continue
            lo, hi = item
            box[i] = Interval(lo, hi)
        intervals = IntervalArray.from_intervals(box)
    if intervals.shape != (model.input_dim,):
        raise ShapeError(
            f"Expected a box of {model.input_dim} intervals, "
            f"got shape {intervals.shape}.")
    return intervals.reshape(1, model.input_dim)


def forward_interval(
    model: MlpModel, box: Any) -> Tuple[Interval, NodeEnclosures]:
    """
    Interval forward and reverse pass over an input box.

    Parameters:
        `model` - the network.

        `box` - one interval per input: `Interval` objects, (lo, hi)
        pairs or a 1-d `IntervalArray`.

    Returns: the enclosure of the output over the box and the
    `NodeEnclosures` of every hidden node.
    """
    if not isinstance(model, MlpModel):
        raise _get_type_error("model", MlpModel, model)
    intervals = _as_box(model, box)
    nodes: Dict[str, List[tape.Variable]] = {}

    def func(x):
        out, nodes["pre"], nodes["post"] = _graph(model, x)
        return out

    recorded = tape.record(func, {"x": intervals})
    adjoints = tape.reverse(recorded, 1.0, wrt="x")
    enclosures = NodeEnclosures(
        pre=[variable.value[0] for variable in nodes["pre"]],
        post=[variable.value[0] for variable in nodes["post"]],
        adjoint=[adjoints[variable.index][0] for variable in nodes["post"]],
        output=recorded.output_value[0, 0],
        fingerprint=fingerprint(model))
    return enclosures.output, enclosures


def _check_hidden_layer(model: MlpModel, layer: int) -> None:
    if not isinstance(layer, int):
        raise _get_type_error("layer", int, layer)
    if not 0 <= layer < model.n_hidden:
        raise PruneError(
            f"Layer {layer} is not a hidden layer; only layers "
            f"0 to {model.n_hidden - 1} can be edited.")


def prune_node(
    model: MlpModel, layer: int, node: int,
    enclosures: Optional[NodeEnclosures]) -> MlpModel:
    """
    Removes one hidden node and compensates the next layer's biases
    with the midpoint of the removed node's outgoing contribution,
    b_j += midpoint(w_ji * [n]_i).

    Parameters:
        `model` - the network (unchanged).

        `layer` - hidden layer index, 0-based.

        `node` - node index within the layer.

        `enclosures` - from `forward_interval` on this very model.

    Raises `PruneError` for non-hidden layers, single-node layers and
    stale or missing enclosures.
    """
    _check_hidden_layer(model, layer)
    width = model.hidden_widths[layer]
    if not isinstance(node, int):
        raise _get_type_error("node", int, node)
    if not 0 <= node < width:
        raise PruneError(f"Layer {layer} has no node {node}.")
    if width < 2:
        raise PruneError(
            f"Layer {layer} has a single node; remove the layer instead.")
    if enclosures is None:
        raise PruneError("Pruning needs the node enclosures of the model.")
    if enclosures.fingerprint != fingerprint(model):
        raise PruneError("Node enclosures are stale; recompute them.")
    layers = model.layers
    w, b = layers[layer]
    w_next, b_next = layers[layer + 1]
    contribution = IntervalArray(w_next[:, node]) * enclosures.post[layer][node]
    layers[layer] = (np.delete(w, node, axis=0), np.delete(b, node))
    layers[layer + 1] = (
        np.delete(w_next, node, axis=1), b_next + contribution.midpoint)
    return model.replace(layers=layers)


def remove_layer(model: MlpModel, layer: int) -> MlpModel:
    """
    Removes hidden layer `layer` (0-based), treating its activation as
    the identity: the two affine maps around it are composed into
    (W_next @ W, W_next @ b + b_next). The result is flagged as
    requiring retraining.
    """
    _check_hidden_layer(model, layer)
    if model.n_hidden == 1:
        raise PruneError("Cannot remove the only hidden layer.")
    layers = model.layers
    w, b = layers[layer]
    w_next, b_next = layers[layer + 1]
    layers[layer:layer + 2] = [(w_next @ w, w_next @ b + b_next)]
    return model.replace(layers=layers, requires_retraining=True)


def serialize(model: MlpModel, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    """
    Encodes the model as a versioned npz record. `metadata` is any
    JSON-serialisable dict stored alongside (e.g. the config hash).
    """
    if not isinstance(model, MlpModel):
        raise _get_type_error("model", MlpModel, model)
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "activation": model.activation,
        "n_layers": len(model._layers),
        "requires_retraining": model.requires_retraining,
        "has_scaling": model.scaling is not None,
        "metadata": metadata or {},
    }
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for i, (w, b) in enumerate(model._layers):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    if model.scaling is not None:
        arrays["x_mean"] = model.scaling.x_mean
        arrays["x_std"] = model.scaling.x_std
        arrays["y_scale"] = np.array([model.scaling.y_mean, model.scaling.y_std])
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    return buffer.getvalue()


def _load_record(data: bytes) -> Tuple[MlpModel, Dict[str, Any]]:
    if not isinstance(data, (bytes, bytearray)):
        raise _get_type_error("data", (bytes, bytearray), data)
    try:
        with np.load(io.BytesIO(bytes(data)), allow_pickle=False) as record:
            arrays = {name: record[name] for name in record.files}
        meta = json.loads(str(arrays["meta"]))
        if meta["format_version"] != MODEL_FORMAT_VERSION:
            raise ModelFormatError(
                f"Unsupported model format version {meta['format_version']}.")
        layers = [
            (arrays[f"w{i}"], arrays[f"b{i}"]) for i in range(meta["n_layers"])]
        scaling = None
        if meta["has_scaling"]:
            y_mean, y_std = arrays["y_scale"]
            scaling = Scaling(arrays["x_mean"], arrays["x_std"], y_mean, y_std)
        model = MlpModel(
            layers, meta["activation"], scaling, meta["requires_retraining"])
    except ModelFormatError:
        raise
    except (
        OSError, ValueError, KeyError, TypeError, EOFError,
        zipfile.BadZipFile) as e:
        raise ModelFormatError(f"Malformed model data: {e}") from e
    return model, meta["metadata"]


def deserialize(data: bytes) -> MlpModel:
    """Decodes bytes produced by `serialize`."""
    return _load_record(data)[0]


def save_model(
    model: MlpModel, path: Union[str, Path],
    metadata: Optional[Dict[str, Any]] = None) -> None:
    """Writes the serialised model to a file."""
    Path(path).write_bytes(serialize(model, metadata))


def load_model(path: Union[str, Path]) -> Tuple[MlpModel, Dict[str, Any]]:
    """Reads a model file. Returns the model and its metadata."""
    return _load_record(Path(path).read_bytes())
