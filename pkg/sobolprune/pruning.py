"""
Interval adjoint significance analysis and structured pruning.

The significance of hidden node i of layer l over an input box is
S = width([n]) * max|[n_bar]|: the width of the node's value enclosure
times the largest sensitivity of the output to it. Nodes with small S
barely vary or barely matter and are removed, their mean contribution
folded into the next layer's biases.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from . import network
from .exceptions import PruneError
from .interval import Interval
from .network import MlpModel, NodeEnclosures
from ._utils import _get_type_error


logger = logging.getLogger(__name__)

Trainer = Callable[[MlpModel], MlpModel]
Validator = Callable[[MlpModel], float]

HISTORY_COLUMNS = [
    "cycle", "action", "layer", "node", "significance",
    "r2_before_retrain", "r2_after_retrain", "params_remaining"]


class PruneConfig(BaseModel):
    """
    Settings of the pruning loop.

    Fields:
        `box` - input box of the significance analysis, one (lo, hi)
        per input; normally the hull of the training inputs.

        `retrain_epochs` - epochs of retraining after each cycle (0
        skips retraining). Default: 10

        `dataset_size` - size of the retraining set. Default: 1024

        `tolerance` - largest accepted drop of validation R² below the
        baseline. Default: 1e-3

        `min_nodes` - layers are never pruned below this width.
        Default: 1

        `nodes_per_cycle` - nodes removed before each retraining; halved
        whenever a multi-node cycle fails. Default: 1

        `max_cycles` - optional cap on the number of cycles.
    """

    model_config = ConfigDict(frozen=True)

    box: Optional[List[Tuple[float, float]]] = None
    retrain_epochs: int = Field(default=10, ge=0)
    dataset_size: int = Field(default=1024, ge=1)
    tolerance: float = Field(default=1e-3, ge=0)
    min_nodes: int = Field(default=1, ge=1)
    nodes_per_cycle: int = Field(default=1, ge=1)
    max_cycles: Optional[int] = Field(default=None, ge=1)


@dataclass(frozen=True)
class SignificanceReport:
    """Significance of every hidden node, with the enclosures behind it."""

    scores: List[np.ndarray]
    enclosures: NodeEnclosures

    def least(
        self, layers: Optional[Sequence[int]] = None
    ) -> Tuple[int, int, float]:
        """
        (layer, node, significance) of the least significant node among
        the given layers (default all). Ties go to the lowest layer,
        then the lowest node index.
        """
        layers = range(len(self.scores)) if layers is None else layers
        best = None
        for layer in layers:
            node = int(np.argmin(self.scores[layer]))
            score = float(self.scores[layer][node])
            if best is None or score < best[2]:
                best = (layer, node, score)
        if best is None:
            raise PruneError("No layer to choose a node from.")
        return best


def _box_intervals(box: Sequence) -> List[Interval]:
    intervals = []
    for item in box:
        if isinstance(item, Interval):
            intervals.append(item)
        else:
            lo, hi = item
            intervals.append(Interval(lo, hi))
    return intervals


def significance(model: MlpModel, box: Sequence) -> SignificanceReport:
    """
    Significance of every hidden node of the model over the box (one
    interval forward and one interval reverse pass).

    Parameters:
        `model` - the network.

        `box` - one `Interval` or (lo, hi) pair per input.
    """
    if not isinstance(model, MlpModel):
        raise _get_type_error("model", MlpModel, model)
    _, enclosures = network.forward_interval(model, _box_intervals(box))
    scores = [
        post.width * adjoint.max_abs
        for post, adjoint in zip(enclosures.post, enclosures.adjoint)]
    return SignificanceReport(scores, enclosures)


def prune_least(
    model: MlpModel, report: SignificanceReport, layer: int
) -> Tuple[MlpModel, int]:
    """
    Removes the least significant node of a hidden layer (lowest index
    on ties) with bias compensation. Returns the new model and the
    index of the removed node.
    """
    if not 0 <= layer < len(report.scores):
        raise PruneError(f"Layer {layer} is not a hidden layer.")
    if len(report.scores[layer]) < 2:
        raise PruneError(f"Layer {layer} has a single node.")
    node = int(np.argmin(report.scores[layer]))
    return network.prune_node(model, layer, node, report.enclosures), node


@dataclass(frozen=True)
class PruneEvent:
    """One logged pruning action."""

    cycle: int
    action: str
    layer: int
    node: Optional[int]
    significance: Optional[float]
    r2_before_retrain: Optional[float]
    r2_after_retrain: Optional[float]
    params_remaining: int


@dataclass
class PruneHistory:
    """Every action of a pruning run, in order."""

    events: List[PruneEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def add(self, event: PruneEvent) -> None:
        """Appends and logs an event."""
        self.events.append(event)
        logger.info(
            "Cycle %d: %s layer %d node %s (S=%s) R² %s -> %s, %d parameters",
            event.cycle, event.action, event.layer, event.node,
            event.significance, event.r2_before_retrain,
            event.r2_after_retrain, event.params_remaining)

    def extend(self, other: "PruneHistory") -> None:
        """Appends the events of another history."""
        self.events.extend(other.events)

    def count(self, action: str) -> int:
        """Number of events of one kind."""
        return sum(1 for event in self.events if event.action == action)

    def to_frame(self) -> pd.DataFrame:
        """One row per event, columns as in HISTORY_COLUMNS."""
        return pd.DataFrame(
            [vars(event) for event in self.events], columns=HISTORY_COLUMNS)

    def write_csv(self, path: Union[str, Path]) -> None:
        """Writes the history as CSV."""
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def _retrain(model: MlpModel, cfg: PruneConfig, trainer: Trainer) -> MlpModel:
    return trainer(model) if cfg.retrain_epochs > 0 else model


def _check_box(cfg: PruneConfig) -> List[Interval]:
    if cfg.box is None:
        raise PruneError("The pruning config has no input box.")
    return _box_intervals(cfg.box)


def iterative_prune(
    model: MlpModel, cfg: PruneConfig, trainer: Trainer, validator: Validator,
    baseline_r2: Optional[float] = None) -> Tuple[MlpModel, PruneHistory]:
    """
    Iteratively removes the least significant hidden nodes.

    Each cycle prunes up to `nodes_per_cycle` nodes, each the globally
    least significant node among the unfrozen layers wider than
    `min_nodes` (significance is recomputed after every removal), then
    retrains with `trainer`, keeping the retrained weights only when they
    validate at least as well as the pruned ones. The cycle is accepted
    if `validator` still scores within `tolerance` of the baseline.
    Otherwise it is reverted: a multi-node cycle halves the cycle size,
    a single-node cycle freezes the layer of that node. The loop ends
    when no layer is eligible or after `max_cycles` cycles.

    Parameters:
        `model` - the trained baseline (unchanged).

        `cfg` - pruning settings; `cfg.box` must be set.

        `trainer` - retrains a candidate model.

        `validator` - validation R² of a model.

        `baseline_r2` - validation score of the baseline (computed
        if omitted).

    Returns: the pruned model and the history of every action.
    """
    box = _check_box(cfg)
    baseline = validator(model) if baseline_r2 is None else baseline_r2
    floor = baseline - cfg.tolerance
    logger.info("Pruning from %s, baseline R² %.6f", model, baseline)
    history = PruneHistory()
    frozen = set()
    cycle_size = cfg.nodes_per_cycle
    cycle = 0

    def eligible(candidate: MlpModel) -> List[int]:
        return [
            layer for layer, width in enumerate(candidate.hidden_widths)
            if layer not in frozen and width > cfg.min_nodes]

    while eligible(model) and (cfg.max_cycles is None or cycle < cfg.max_cycles):
        cycle += 1
        candidate = model
        removed = []
        for _ in range(cycle_size):
            layers = eligible(candidate)
            if not layers:
                break
            report = significance(candidate, box)
            layer, node, score = report.least(layers)
            candidate = network.prune_node(
                candidate, layer, node, report.enclosures)
            removed.append((layer, node, score))
        r2_before = validator(candidate)
        retrained = _retrain(candidate, cfg, trainer)
        r2_after = validator(retrained)
        # A retrain that scores worse than the pruned weights is dropped.
        if not r2_after >= r2_before:
            retrained, r2_after = candidate, r2_before
        accepted = math.isfinite(r2_after) and r2_after >= floor
        for layer, node, score in removed:
            history.add(PruneEvent(
                cycle, "prune", layer, node, score, r2_before, r2_after,
                network.parameter_count(retrained)))
        if accepted:
            model = retrained
            continue
        history.add(PruneEvent(
            cycle, "revert", removed[0][0], None, None, r2_before, r2_after,
            network.parameter_count(model)))
        if len(removed) > 1:
            cycle_size = max(1, len(removed) // 2)
            continue
        frozen.add(removed[0][0])
        history.add(PruneEvent(
            cycle, "freeze", removed[0][0], None, None, None, None,
            network.parameter_count(model)))
    logger.info("Pruning finished after %d cycles: %s", cycle, model)
    return model, history


def try_remove_layers(
    model: MlpModel, cfg: PruneConfig, trainer: Trainer, validator: Validator,
    baseline_r2: Optional[float] = None) -> Tuple[MlpModel, PruneHistory]:
    """
    Removes the hidden layers that follow the first single-node hidden
    layer, deepest first. Each removal is retrained and kept only if the
    validation score stays within `tolerance` of the baseline; a failed
    removal is reverted and the next layer is tried.

    A model with one hidden layer or without a single-node layer is
    returned unchanged.
    """
    history = PruneHistory()
    widths = model.hidden_widths
    if model.n_hidden <= 1 or 1 not in widths:
        logger.info("No hidden layer can be removed from %s", model)
        return model, history
    baseline = validator(model) if baseline_r2 is None else baseline_r2
    floor = baseline - cfg.tolerance
    bottleneck = widths.index(1)
    for cycle, layer in enumerate(
        range(model.n_hidden - 1, bottleneck, -1), start=1):
        candidate = network.remove_layer(model, layer)
        r2_before = validator(candidate)
        retrained = _retrain(candidate, cfg, trainer)
        r2_after = validator(retrained)
        if math.isfinite(r2_after) and r2_after >= floor:
            model = retrained
            action = "remove_layer"
        else:
            action = "revert_layer"
        history.add(PruneEvent(
            cycle, action, layer, None, None, r2_before, r2_after,
            network.parameter_count(model)))
    return model, history
