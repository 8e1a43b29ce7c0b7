"""
The experiment pipeline and its command line interface.

A run directory holds the training dataset, a manifest with the config
hash, and one directory per stage (baseline, pruned, layers-removed,
sobolev-nn, sobolev-ref and optionally random-init), each with the
model file, a JSON report, the stage CSVs and the stage's wall time.
Every stage can be rerun from the artifacts of the previous ones.
"""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__, market, network, pruning, training
from .exceptions import ArtifactError, ConfigError, NumericalError
from .market import BasketConfig, Dataset
from .network import MlpModel
from .pruning import PruneConfig, PruneHistory
from .training import OneCycleConfig, SobolevConfig, TrainingLog
from .training import baseline_schedule as default_schedule
from .training import finetune_schedule as default_finetune_schedule
from .training import retrain_schedule as default_retrain_schedule
from ._utils import _derive_seed, _hash_json


logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
ENV_PREFIX = "SOBOLPRUNE_"
STAGES = ("baseline", "pruned", "layers-removed", "sobolev-nn", "sobolev-ref")
RANDOM_INIT_STAGE = "random-init"
SOURCE_STAGES = {"network": "sobolev-nn", "reference": "sobolev-ref"}
CLI_SOURCES = {"nn": "network", "reference": "reference"}
DATASET_FILE = "dataset.csv"
MANIFEST_FILE = "manifest.json"
MODEL_FILE = "model.npz"
REPORT_FILE = "report.json"
TIMING_FILE = "timing.json"
EVALUATION_FILE = "evaluation.csv"
TRAINING_LOG_FILE = "training_log.csv"
PRUNE_HISTORY_FILE = "prune_history.csv"
RESTARTS_FILE = "restarts.csv"
SUMMARY_ROWS = (("Values", "values_r2"), ("Deltas", "deltas_r2"), ("Gammas", "gammas_r2"))

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERICAL = 4


class ArchitectureConfig(BaseModel):
    """Hidden widths and activation of the baseline network."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden_widths: List[int] = Field(default_factory=lambda: [128] * 6)
    activation: Literal["relu", "silu"] = "silu"


class DataConfig(BaseModel):
    """
    Dataset and grid sizes. Each training label averages the payoffs of
    `paths_per_sample` paths from the same initial forwards.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    train_size: int = Field(default=8192, ge=1)
    test_grid: int = Field(default=512, ge=2)
    validation_size: int = Field(default=512, ge=2)
    paths_per_sample: int = Field(default=1, ge=1)


class TrainConfig(BaseModel):
    """Baseline training length and batch size."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(default=training.DEFAULT_EPOCHS, ge=0)
    batch_size: int = Field(default=training.DEFAULT_BATCH_SIZE, ge=1)


class ExperimentConfig(BaseModel):
    """
    Everything a run depends on. Every setting has a dotted path such as
    `prune.tolerance`; `output_dir` is the only setting that does not
    enter the config hash.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    version: Literal[1] = CONFIG_VERSION
    basket: BasketConfig = Field(default_factory=market.default_basket)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    schedule: OneCycleConfig = Field(default_factory=default_schedule)
    finetune_schedule: OneCycleConfig = Field(
        default_factory=default_finetune_schedule)
    retrain_schedule: OneCycleConfig = Field(
        default_factory=default_retrain_schedule)
    sobolev: SobolevConfig = Field(default_factory=SobolevConfig)
    prune: PruneConfig = Field(default_factory=PruneConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    random_restarts: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)

    @property
    def out(self) -> Path:
        """The run directory."""
        return Path(self.output_dir)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON of the config without its output directory."""
    return _hash_json(cfg.model_dump(mode="json", exclude={"output_dir"}))


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> None:
    # Nested dicts are merged key by key; everything else is replaced.
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def _set_path(data: Dict[str, Any], path: Sequence[str], value: Any) -> None:
    for key in path[:-1]:
        child = data.get(key)
        if not isinstance(child, dict):
            child = data[key] = {}
        data = child
    data[path[-1]] = value


def load_config(
    path: Union[str, Path, None] = None,
    env: Optional[Mapping[str, str]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    output_dir: Union[str, Path, None] = None) -> ExperimentConfig:
    """
    Builds the experiment config from (in increasing precedence) the
    defaults, a JSON file, SOBOLPRUNE_<PATH> environment variables
    (path segments joined with '__', e.g. SOBOLPRUNE_PRUNE__TOLERANCE)
    and explicit overrides ('prune.tolerance=0.01', then `seed` and
    `output_dir`). Values are parsed as JSON where possible.

    Raises `ConfigError` for unreadable files and invalid settings.
    """
    data: Dict[str, Any] = ExperimentConfig().model_dump(mode="json")
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("A config file must hold a JSON object.")
        _merge(data, loaded)
    env = os.environ if env is None else env
    for key in sorted(env):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        # Other SOBOLPRUNE_ variables (e.g. test switches) are not settings.
        if parts[0] in ExperimentConfig.model_fields:
            _set_path(data, parts, _parse_value(env[key]))
    for override in overrides:
        name, separator, value = override.partition("=")
        if not separator or not name:
            raise ConfigError(f"Override {override!r} is not of the form path=value.")
        _set_path(data, name.strip().split("."), _parse_value(value))
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


@dataclass(frozen=True)
class RunReport:
    """
    Evaluation summary of one stage. Wall time is not part of it; it is
    recorded in the stage's timing.json.
    """

    stage: str
    values_r2: float
    deltas_r2: float
    gammas_r2: float
    parameter_count: int
    hidden_widths: List[int]
    grid: int
    config_hash: str

    def to_json(self) -> str:
        """Deterministic JSON text."""
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "RunReport":
        """Parses `to_json` output."""
        return RunReport(**json.loads(text))


def _stage_dir(cfg: ExperimentConfig, stage: str) -> Path:
    return cfg.out / stage


def _write_manifest(cfg: ExperimentConfig) -> None:
    manifest = {
        "version": CONFIG_VERSION,
        "package_version": __version__,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "config": cfg.model_dump(mode="json"),
    }
    (cfg.out / MANIFEST_FILE).write_text(
        json.dumps(manifest, sort_keys=True, indent=2), encoding="utf8")


def _check_manifest(cfg: ExperimentConfig) -> None:
    path = cfg.out / MANIFEST_FILE
    if not path.is_file():
        raise ArtifactError(f"No run manifest at {path}; run 'generate' first.")
    recorded = json.loads(path.read_text(encoding="utf8"))["config_hash"]
    if recorded != config_hash(cfg):
        raise ConfigError(
            f"The config differs from the one that produced {cfg.out} "
            f"(hash {recorded[:12]} vs {config_hash(cfg)[:12]}).")


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    _check_manifest(cfg)
    return market.read_dataset(cfg.out / DATASET_FILE)


def _load_model(
    cfg: ExperimentConfig, stage: str,
    model_path: Union[str, Path, None] = None) -> MlpModel:
    path = Path(model_path) if model_path else _stage_dir(cfg, stage) / MODEL_FILE
    if not path.is_file():
        raise ArtifactError(f"Model file {path} does not exist.")
    model, metadata = network.load_model(path)
    if metadata.get("config_hash") != config_hash(cfg):
        raise ConfigError(f"Model {path} was produced by a different config.")
    return model


def prune_box(cfg: ExperimentConfig, dataset: Dataset) -> List[List[float]]:
    """The configured pruning box, else the hull of the training inputs."""
    if cfg.prune.box is not None:
        return [list(bounds) for bounds in cfg.prune.box]
    return [[interval.lo, interval.hi] for interval in dataset.hull()]


def validation_inputs(cfg: ExperimentConfig) -> np.ndarray:
    """Held-out points, uniform in the spot box."""
    return training.uniform_inputs(
        cfg.basket.spot_box, cfg.data.validation_size,
        _derive_seed(cfg.seed, "validation"))


def make_validator(cfg: ExperimentConfig):
    """Value R² against the analytic price on the held-out points."""
    inputs = validation_inputs(cfg)
    targets = market.analytic_price(cfg.basket, inputs)

    def validator(model: MlpModel) -> float:
        return training.r2_score(model.predict(inputs), targets)

    return validator


def evaluate_stage(
    cfg: ExperimentConfig, stage: str, model: Any,
    directory: Optional[Path] = None) -> RunReport:
    """
    Evaluates a surrogate on the test grid and writes report.json and
    evaluation.csv to the stage directory.
    """
    directory = directory or _stage_dir(cfg, stage)
    directory.mkdir(parents=True, exist_ok=True)
    evaluation, frame = training.evaluate(model, cfg.basket, cfg.data.test_grid)
    is_network = isinstance(model, MlpModel)
    report = RunReport(
        stage=stage,
        values_r2=evaluation.values_r2,
        deltas_r2=evaluation.deltas_r2,
        gammas_r2=evaluation.gammas_r2,
        parameter_count=network.parameter_count(model) if is_network else 0,
        hidden_widths=model.hidden_widths if is_network else [],
        grid=evaluation.grid,
        config_hash=config_hash(cfg))
    frame.to_csv(directory / EVALUATION_FILE, index=False, float_format="%.17g")
    (directory / REPORT_FILE).write_text(report.to_json(), encoding="utf8")
    logger.info(
        "Stage %s: values R² %.6f, deltas R² %.6f, gammas R² %.6f",
        stage, report.values_r2, report.deltas_r2, report.gammas_r2)
    return report


def _write_stage(
    cfg: ExperimentConfig, stage: str, model: MlpModel, started: float,
    log: Optional[TrainingLog] = None,
    history: Optional[PruneHistory] = None) -> RunReport:
    directory = _stage_dir(cfg, stage)
    directory.mkdir(parents=True, exist_ok=True)
    network.save_model(
        model, directory / MODEL_FILE,
        {"config_hash": config_hash(cfg), "stage": stage})
    if log is not None:
        log.write_csv(directory / TRAINING_LOG_FILE)
    if history is not None:
        history.write_csv(directory / PRUNE_HISTORY_FILE)
    report = evaluate_stage(cfg, stage, model, directory)
    elapsed = time.perf_counter() - started
    (directory / TIMING_FILE).write_text(
        json.dumps({"stage": stage, "wall_time_s": elapsed}), encoding="utf8")
    logger.info("Stage %s finished in %.1f s", stage, elapsed)
    return report


def cmd_generate(cfg: ExperimentConfig) -> Path:
    """Samples the training dataset and writes it with the run manifest."""
    started = time.perf_counter()
    logger.info("Generating %d samples into %s", cfg.data.train_size, cfg.out)
    cfg.out.mkdir(parents=True, exist_ok=True)
    dataset = market.sample(
        cfg.basket, cfg.data.train_size, _derive_seed(cfg.seed, "generate"),
        cfg.workers, cfg.data.paths_per_sample)
    path = cfg.out / DATASET_FILE
    market.write_dataset(dataset, path)
    _write_manifest(cfg)
    logger.info("Dataset written in %.1f s", time.perf_counter() - started)
    return path


def cmd_train(cfg: ExperimentConfig) -> RunReport:
    """Trains the oversized baseline network on the dataset."""
    started = time.perf_counter()
    dataset = _load_dataset(cfg)
    model = network.init_model(
        dataset.m, cfg.architecture.hidden_widths,
        cfg.architecture.activation, _derive_seed(cfg.seed, "init"))
    logger.info("Training baseline %s", model)
    model, log = training.train_mse(
        model, dataset, cfg.schedule, cfg.training.epochs,
        _derive_seed(cfg.seed, "train"), cfg.training.batch_size)
    return _write_stage(cfg, "baseline", model, started, log=log)


def cmd_prune(
    cfg: ExperimentConfig,
    model_path: Union[str, Path, None] = None) -> List[RunReport]:
    """
    Prunes the baseline node by node, then removes the layers after the
    first single-node layer. Writes the pruned and layers-removed stages
    (and random-init when `random_restarts` > 0).
    """
    started = time.perf_counter()
    dataset = _load_dataset(cfg)
    model = _load_model(cfg, "baseline", model_path)
    prune_cfg = cfg.prune.model_copy(update={"box": prune_box(cfg, dataset)})
    retrain_set = dataset.subset(slice(0, prune_cfg.dataset_size))
    retrain_seed = _derive_seed(cfg.seed, "retrain")

    def trainer(candidate: MlpModel) -> MlpModel:
        return training.train_mse(
            candidate, retrain_set, cfg.retrain_schedule,
            prune_cfg.retrain_epochs, retrain_seed,
            cfg.training.batch_size)[0]

    validator = make_validator(cfg)
    baseline_r2 = validator(model)
    pruned, history = pruning.iterative_prune(
        model, prune_cfg, trainer, validator, baseline_r2)
    reports = [_write_stage(cfg, "pruned", pruned, started, history=history)]
    started = time.perf_counter()
    reduced, layer_history = pruning.try_remove_layers(
        pruned, prune_cfg, trainer, validator, baseline_r2)
    reports.append(_write_stage(
        cfg, "layers-removed", reduced, started, history=layer_history))
    if cfg.random_restarts:
        reports.append(_random_init_stage(cfg, dataset, reduced, validator))
    return reports


def _random_init_stage(
    cfg: ExperimentConfig, dataset: Dataset, pruned: MlpModel,
    validator) -> RunReport:
    # The pruned architecture trained from random weights, best of n.
    started = time.perf_counter()
    seeds = [
        _derive_seed(cfg.seed, "restart", i) for i in range(cfg.random_restarts)]
    models, summary = training.train_from_scratch(
        pruned.hidden_widths, pruned.activation, dataset, cfg.schedule,
        cfg.training.epochs, seeds, validator, cfg.training.batch_size)
    directory = _stage_dir(cfg, RANDOM_INIT_STAGE)
    directory.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"seed": seeds, "r2": summary.scores}).to_csv(
        directory / RESTARTS_FILE, index=False, float_format="%.17g")
    logger.info(
        "Random restarts: mean R² %.6f, std %.6f", summary.mean, summary.std)
    best = models[int(np.argmax(summary.scores))]
    return _write_stage(cfg, RANDOM_INIT_STAGE, best, started)


def finetune_data(cfg: ExperimentConfig, source: str) -> Dataset:
    """
    Derivative-labelled data for fine-tuning: the pathwise Monte Carlo
    dataset ('reference') or the baseline network's own values and
    gradients at uniform inputs ('network', no market model involved).
    """
    if source == "reference":
        return _load_dataset(cfg)
    if source == "network":
        _check_manifest(cfg)
        baseline = _load_model(cfg, "baseline")
        inputs = training.uniform_inputs(
            cfg.basket.spot_box, cfg.data.train_size,
            _derive_seed(cfg.seed, "network-inputs"))
        return training.network_dataset(baseline, inputs)
    raise ConfigError(f"Unknown derivative source {source!r}.")


def cmd_finetune(
    cfg: ExperimentConfig, source: Optional[str] = None,
    model_path: Union[str, Path, None] = None) -> RunReport:
    """Sobolev fine-tuning of the pruned model (or `model_path`)."""
    started = time.perf_counter()
    source = source or cfg.sobolev.source
    if source not in SOURCE_STAGES:
        raise ConfigError(f"Unknown derivative source {source!r}.")
    model = _load_model(cfg, "pruned", model_path)
    data = finetune_data(cfg, source)
    logger.info("Sobolev fine-tuning %s on %s derivatives", model, source)
    model, log = training.train_sobolev(
        model, data, cfg.sobolev, cfg.finetune_schedule,
        _derive_seed(cfg.seed, "finetune", source))
    return _write_stage(cfg, SOURCE_STAGES[source], model, started, log=log)


def cmd_evaluate(
    cfg: ExperimentConfig, model_path: Union[str, Path, None] = None
) -> Dict[str, RunReport]:
    """
    Re-evaluates every stage present in the run (or only the model file
    `model_path`, whose report is written next to it).
    """
    if model_path is not None:
        path = Path(model_path)
        model = _load_model(cfg, "", path)
        return {path.parent.name: evaluate_stage(
            cfg, path.parent.name, model, path.parent)}
    reports = {}
    for stage in STAGES + (RANDOM_INIT_STAGE,):
        if (_stage_dir(cfg, stage) / MODEL_FILE).is_file():
            reports[stage] = evaluate_stage(cfg, stage, _load_model(cfg, stage))
    if not reports:
        raise ArtifactError(f"No stage models found in {cfg.out}.")
    return reports


def cmd_report(cfg: ExperimentConfig) -> pd.DataFrame:
    """
    Collects the stage reports into one table (rows Values, Deltas,
    Gammas; one column per stage present) and writes summary.csv and
    summary.md to the run directory. Missing stages are skipped with a
    warning.
    """
    columns = {}
    for stage in STAGES + (RANDOM_INIT_STAGE,):
        path = _stage_dir(cfg, stage) / REPORT_FILE
        if not path.is_file():
            if stage != RANDOM_INIT_STAGE:
                logger.warning("Stage %s has no report; column omitted.", stage)
            continue
        report = RunReport.from_json(path.read_text(encoding="utf8"))
        columns[stage] = [getattr(report, field) for _, field in SUMMARY_ROWS]
    if not columns:
        raise ArtifactError(f"No stage reports found in {cfg.out}.")
    table = pd.DataFrame(columns, index=[label for label, _ in SUMMARY_ROWS])
    table.index.name = "metric"
    table.to_csv(cfg.out / "summary.csv", float_format="%.6f")
    lines = [
        "| metric | " + " | ".join(table.columns) + " |",
        "| --- |" + " ---: |" * len(table.columns),
    ]
    for label, row in table.iterrows():
        lines.append(
            f"| {label} | " + " | ".join(f"{value:.6f}" for value in row) + " |")
    (cfg.out / "summary.md").write_text("\n".join(lines) + "\n", encoding="utf8")
    return table


def cmd_all(cfg: ExperimentConfig) -> pd.DataFrame:
    """Runs every stage in order and returns the summary table."""
    cmd_generate(cfg)
    cmd_train(cfg)
    cmd_prune(cfg)
    cmd_finetune(cfg, "network")
    cmd_finetune(cfg, "reference")
    return cmd_report(cfg)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="run directory")
    common.add_argument(
        "--set", action="append", default=[], metavar="PATH=VALUE",
        help="override one setting, e.g. prune.tolerance=0.01")
    common.add_argument(
        "-v", "--verbose", action="store_true", help="debug logging")
    parser = argparse.ArgumentParser(
        prog="sobolprune",
        description="Train, prune and Sobolev fine-tune option pricing surrogates.")
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "report", "all"):
        commands.add_parser(name, parents=[common])
    for name in ("prune", "evaluate"):
        command = commands.add_parser(name, parents=[common])
        command.add_argument("--stage-model", help="model file to use")
    finetune = commands.add_parser("finetune", parents=[common])
    finetune.add_argument("--stage-model", help="model file to fine-tune")
    finetune.add_argument(
        "--source", choices=sorted(CLI_SOURCES), help="derivative source")
    return parser


def run(args: argparse.Namespace) -> Any:
    """Executes a parsed command line."""
    cfg = load_config(args.config, None, args.set, args.seed, args.out)
    if args.command == "generate":
        return cmd_generate(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "prune":
        return cmd_prune(cfg, args.stage_model)
    if args.command == "finetune":
        source = CLI_SOURCES[args.source] if args.source else None
        return cmd_finetune(cfg, source, args.stage_model)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.stage_model)
    if args.command == "report":
        table = cmd_report(cfg)
        print(table.to_string(float_format=lambda value: f"{value:.6f}"))
        return table
    return cmd_all(cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Command line entry point. Returns the process exit code."""
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except ArtifactError as e:
        logger.error("%s", e)
        return EXIT_ARTIFACT
    except NumericalError as e:
        logger.error("%s", e)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
