"""
Experiment engine.

Parses declarative JSON experiment configurations, runs every
(partition, protocol) cell for R seeded trials, and aggregates mean and
standard deviation of test accuracy together with drop rates against a
declared reference cell.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datasets import LabeledDataset, SynthSpec, load_idx, stratified_split, synth_generate
from .evaluation import drop_rate, evaluate_run
from .federation import Method, ProtocolConfig, run_protocol
from .network import ARCHITECTURES, arch_from_name
from .report import CellResult, ExperimentReport, PartitionSummary, TrialResult
from .seeding import derive_seed
from .skew import PartitionPlan, build_partition, score_partition

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEFAULT_SPLIT = (0.5, 0.25, 0.25)
DEFAULT_REPEATS = 4
SPLIT_FILES = {
    name: (f"{name}-images.idx", f"{name}-labels.idx") for name in ("train", "val", "test")
}


def _check_keys(data: Dict, allowed: Sequence[str], path: str) -> None:
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ValueError(f"Unknown key '{path}.{unknown[0]}'" if path else f"Unknown key '{unknown[0]}'")


@dataclass(frozen=True)
class TrainingSettings:
    """Hyperparameters shared by every protocol of an experiment."""

    batch_size: Optional[int] = 32
    learning_rate: float = 0.05
    epochs: int = 10
    threads: int = 1

    def to_dict(self) -> Dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, data: Dict, path: str = "training") -> "TrainingSettings":
        _check_keys(data, ("batch_size", "learning_rate", "epochs", "threads"), path)
        batch_size = data.get("batch_size", 32)
        return cls(
            batch_size=None if batch_size is None else int(batch_size),
            learning_rate=float(data.get("learning_rate", 0.05)),
            epochs=int(data.get("epochs", 10)),
            threads=int(data.get("threads", 1)),
        )


@dataclass(frozen=True)
class ProtocolEntry:
    """One protocol column of an experiment: method plus mitigation flags."""

    id: str
    method: Method
    wp: bool = False
    wl: bool = False
    bn_avg: bool = False
    uniform_fedavg: bool = False

    def __post_init__(self):
        # Reuses the protocol-level validation of flag combinations
        config = self.protocol_config(TrainingSettings(), 0, 0)
        object.__setattr__(self, "method", config.method)

    @property
    def mitigations(self) -> str:
        return self.protocol_config(TrainingSettings(), 0, 0).mitigations

    def protocol_config(self, training: TrainingSettings, model_seed: int, data_seed: int, threads: Optional[int] = None) -> ProtocolConfig:
        return ProtocolConfig(
            method=self.method,
            wp=self.wp,
            wl=self.wl,
            bn_avg=self.bn_avg,
            batch_size=training.batch_size,
            learning_rate=training.learning_rate,
            epochs=training.epochs,
            model_seed=model_seed,
            data_seed=data_seed,
            uniform_fedavg=self.uniform_fedavg,
            threads=training.threads if threads is None else threads,
        )

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "method": Method(self.method).value,
            "wp": self.wp,
            "wl": self.wl,
            "bn_avg": self.bn_avg,
            "uniform_fedavg": self.uniform_fedavg,
        }

    @classmethod
    def from_dict(cls, data: Dict, path: str) -> "ProtocolEntry":
        _check_keys(data, ("id", "method", "wp", "wl", "bn_avg", "uniform_fedavg"), path)
        if "method" not in data:
            raise ValueError(f"{path}.method: missing")
        flags = {key: data.get(key, False) for key in ("wp", "wl", "bn_avg", "uniform_fedavg")}
        for key, value in flags.items():
            if not isinstance(value, bool):
                raise ValueError(f"{path}.{key}: expected true or false")
        default_id = data["method"]
        enabled = [name for name, key in (("WP", "wp"), ("WL", "wl"), ("BN", "bn_avg")) if flags[key]]
        if enabled:
            default_id += "+" + "+".join(enabled)
        try:
            return cls(id=str(data.get("id", default_id)), method=data["method"], **flags)
        except ValueError as e:
            raise ValueError(f"{path}: {e}")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A validated experiment configuration."""

    name: str
    dataset: Dict
    partitions: Tuple[PartitionPlan, ...]
    protocols: Tuple[ProtocolEntry, ...]
    split: Tuple[float, float, float] = DEFAULT_SPLIT
    arch: Dict = field(default_factory=lambda: {"name": "tiny-conv"})
    training: TrainingSettings = TrainingSettings()
    repeats: int = DEFAULT_REPEATS
    base_seed: int = 0
    reference: Optional[Dict[str, str]] = None
    cross_matrix: bool = False
    output_dir: str = "results"

    def to_dict(self) -> Dict:
        data = {
            "name": self.name,
            "dataset": self.dataset,
            "split": list(self.split),
            "arch": dict(self.arch),
            "training": self.training.to_dict(),
            "partitions": [plan.to_dict() for plan in self.partitions],
            "protocols": [entry.to_dict() for entry in self.protocols],
            "repeats": self.repeats,
            "base_seed": self.base_seed,
            "cross_matrix": self.cross_matrix,
            "output_dir": self.output_dir,
        }
        if self.reference is not None:
            data["reference"] = dict(self.reference)
        return data


_TOP_LEVEL_KEYS = (
    "name", "dataset", "split", "arch", "training", "partitions", "protocols",
    "repeats", "base_seed", "reference", "cross_matrix", "output_dir",
)


def _parse_dataset(data: Dict) -> Dict:
    _check_keys(data, ("synth", "idx"), "dataset")
    if len(data) != 1:
        raise ValueError("dataset: give exactly one of 'synth' or 'idx'")
    if "synth" in data:
        try:
            spec = SynthSpec.from_dict(data["synth"])
        except (TypeError, ValueError) as e:
            raise ValueError(f"dataset.synth: {e}")
        return {"synth": spec.to_dict()}

    idx = data["idx"]
    _check_keys(idx, ("dir", "images", "labels", "num_categories"), "dataset.idx")
    if ("dir" in idx) == ("images" in idx or "labels" in idx):
        raise ValueError("dataset.idx: give either 'dir' or both 'images' and 'labels'")
    if "dir" not in idx and not ("images" in idx and "labels" in idx):
        raise ValueError("dataset.idx: 'images' and 'labels' must be given together")
    return {"idx": dict(idx)}


def _parse_split(value) -> Tuple[float, float, float]:
    if isinstance(value, dict):
        _check_keys(value, ("train", "val", "test"), "split")
        value = [value.get("train", 0.0), value.get("val", 0.0), value.get("test", 0.0)]
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ValueError("split: expected three fractions (train, val, test)")
    fractions = tuple(float(v) for v in value)
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split: fractions must be positive and sum to 1, got {list(fractions)}")
    return fractions


def _parse_arch(value) -> Dict:
    if isinstance(value, str):
        value = {"name": value}
    _check_keys(value, ("name", "hidden"), "arch")
    name = value.get("name", "tiny-conv")
    if name not in ARCHITECTURES:
        raise ValueError(f"arch.name: unknown architecture '{name}'; choose from {sorted(ARCHITECTURES)}")
    if "hidden" in value and (name == "tiny-conv" or int(value["hidden"]) < 1):
        raise ValueError("arch.hidden: only mlp architectures take a positive hidden width")
    return dict(value, name=name)


def config_from_dict(data: Dict) -> ExperimentConfig:
    """Validate a configuration dictionary, naming the offending field on error."""
    _check_keys(data, _TOP_LEVEL_KEYS, "")
    for key in ("dataset", "partitions", "protocols"):
        if key not in data:
            raise ValueError(f"{key}: missing")

    partitions_data = data["partitions"]
    if not isinstance(partitions_data, list) or not partitions_data:
        raise ValueError("partitions: expected a non-empty list")
    partitions = []
    for i, entry in enumerate(partitions_data):
        plan = PartitionPlan.from_dict(entry, path=f"partitions[{i}]")
        if not plan.id:
            default_id = entry.get("preset", f"partition-{i + 1}") if isinstance(entry, dict) else f"partition-{i + 1}"
            plan = PartitionPlan.from_dict(dict(plan.to_dict(), id=default_id), path=f"partitions[{i}]")
        partitions.append(plan)

    protocols_data = data["protocols"]
    if not isinstance(protocols_data, list) or not protocols_data:
        raise ValueError("protocols: expected a non-empty list")
    protocols = [ProtocolEntry.from_dict(entry, f"protocols[{i}]") for i, entry in enumerate(protocols_data)]

    for kind, ids in (("partition", [p.id for p in partitions]), ("protocol", [p.id for p in protocols])):
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ValueError(f"Duplicate {kind} id '{duplicates[0]}'")

    repeats = data.get("repeats", DEFAULT_REPEATS)
    if not isinstance(repeats, int) or repeats < 1:
        raise ValueError(f"repeats: must be a positive integer, got {repeats!r}")

    reference = data.get("reference")
    if reference is not None:
        _check_keys(reference, ("partition", "protocol"), "reference")
        if len(reference) != 1:
            raise ValueError("reference: give exactly one of 'partition' or 'protocol'")
        kind, ref_id = next(iter(reference.items()))
        known = [p.id for p in (partitions if kind == "partition" else protocols)]
        if ref_id not in known:
            raise ValueError(f"reference.{kind}: unknown id '{ref_id}'")

    cross_matrix = data.get("cross_matrix", False)
    if not isinstance(cross_matrix, bool):
        raise ValueError("cross_matrix: expected true or false")

    try:
        training = TrainingSettings.from_dict(data.get("training", {}))
        ProtocolConfig(Method.CENTRALIZED, batch_size=training.batch_size,
                       learning_rate=training.learning_rate, epochs=training.epochs,
                       threads=training.threads)
    except (TypeError, ValueError) as e:
        raise ValueError(f"training: {e}")

    return ExperimentConfig(
        name=str(data.get("name", "experiment")),
        dataset=_parse_dataset(data["dataset"]),
        partitions=tuple(partitions),
        protocols=tuple(protocols),
        split=_parse_split(data.get("split", list(DEFAULT_SPLIT))),
        arch=_parse_arch(data.get("arch", {"name": "tiny-conv"})),
        training=training,
        repeats=repeats,
        base_seed=int(data.get("base_seed", 0)),
        reference=None if reference is None else dict(reference),
        cross_matrix=cross_matrix,
        output_dir=str(data.get("output_dir", "results")),
    )


def parse_config(text: str) -> ExperimentConfig:
    """
    Parse a JSON experiment configuration in strict mode.

    Raises:
        ValueError: On syntax errors (with line and column) and on unknown or
            invalid fields (naming the dotted key path)
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"config syntax error at line {e.lineno} column {e.colno}: {e.msg}")
    return config_from_dict(data)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    return parse_config(path.read_text())


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def load_idx_dir(directory: Union[str, Path], num_categories: Optional[int] = None):
    """Load the train/val/test IDX pairs written by the synth command."""
    directory = Path(directory)
    parts = {
        name: load_idx(directory / images, directory / labels)
        for name, (images, labels) in SPLIT_FILES.items()
    }
    if num_categories is None:
        num_categories = max(ds.num_categories for ds in parts.values())
    return tuple(
        LabeledDataset(ds.images, ds.labels, num_categories, ds.ids) for ds in
        (parts["train"], parts["val"], parts["test"])
    )


def load_experiment_data(cfg: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Training, validation and test pools of an experiment."""
    split_seed = derive_seed(cfg.base_seed, "split")
    if "synth" in cfg.dataset:
        ds = synth_generate(SynthSpec.from_dict(cfg.dataset["synth"]))
        return stratified_split(ds, cfg.split, split_seed)

    idx = cfg.dataset["idx"]
    num_categories = idx.get("num_categories")
    if "dir" in idx:
        return load_idx_dir(idx["dir"], num_categories)
    ds = load_idx(idx["images"], idx["labels"], num_categories)
    return stratified_split(ds, cfg.split, split_seed)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def trial_seeds(base_seed: int, partition_id: str, protocol_id: str, trial: int) -> Dict[str, int]:
    """Seeds of one trial; every (partition, protocol, trial) tuple gets its own."""
    trial_seed = derive_seed(base_seed, partition_id, protocol_id, trial)
    return {
        "trial": trial_seed,
        "partition": derive_seed(base_seed, partition_id, trial),
        "model": derive_seed(trial_seed, "model"),
        "data": derive_seed(trial_seed, "data"),
    }


def _sample_std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _reference_cell(cfg: ExperimentConfig, cells: Dict, partition_id: str, protocol_id: str):
    if cfg.reference is None:
        return None, None
    if "partition" in cfg.reference:
        ref = cells.get((cfg.reference["partition"], protocol_id))
        label = f"partition:{cfg.reference['partition']}"
    else:
        ref = cells.get((partition_id, cfg.reference["protocol"]))
        label = f"protocol:{cfg.reference['protocol']}"
    if ref is None or ref.error is not None or not ref.mean_accuracy > 0:
        return None, label
    return ref, label


def run_experiment(cfg: ExperimentConfig, threads: Optional[int] = None) -> ExperimentReport:
    """
    Run every (partition, protocol) cell for cfg.repeats trials.

    A failing cell is recorded with its error message and the remaining
    cells still run. Results depend only on cfg, never on the thread count.
    """
    train, val, test = load_experiment_data(cfg)
    arch = arch_from_name(cfg.arch["name"], train.image_shape, train.num_categories, cfg.arch.get("hidden"))
    logger.info(
        f"Experiment '{cfg.name}': {len(cfg.partitions)} partitions x {len(cfg.protocols)} protocols "
        f"x {cfg.repeats} trials on {len(train)} training samples"
    )

    summaries: List[PartitionSummary] = []
    cells: Dict[Tuple[str, str], CellResult] = {}

    for plan in cfg.partitions:
        trial_shards, trial_skew, partition_error = [], [], None
        try:
            for trial in range(cfg.repeats):
                seed = derive_seed(cfg.base_seed, plan.id, trial)
                shards = build_partition(plan, train, val, test, seed=seed)
                trial_shards.append(shards)
                trial_skew.append(score_partition(shards) if len(shards) > 1 else None)
        except ValueError as e:
            logger.warning(f"Partition '{plan.id}' could not be built: {e}")
            partition_error = str(e)
        summaries.append(PartitionSummary(
            plan.id, plan.regime.value, trial_skew[0] if trial_skew and partition_error is None else None,
        ))

        for entry in cfg.protocols:
            key = (plan.id, entry.id)
            if partition_error is not None:
                cells[key] = CellResult(plan.id, entry.id, entry.method.value, entry.mitigations, (), error=partition_error)
                continue
            try:
                trials = []
                for trial in range(cfg.repeats):
                    seeds = trial_seeds(cfg.base_seed, plan.id, entry.id, trial)
                    pcfg = entry.protocol_config(cfg.training, seeds["model"], seeds["data"], threads)
                    shards = trial_shards[trial]
                    run = run_protocol(shards, pcfg, arch)
                    result = evaluate_run(
                        run, [s.test for s in shards], entry.method.value, entry.mitigations,
                        with_matrix=cfg.cross_matrix, seeds=seeds,
                    )
                    skew = trial_skew[trial]
                    trials.append(TrialResult(
                        trial=trial,
                        seed=seeds["trial"],
                        test_accuracy=result.test_accuracy,
                        selected_round=result.selected_round,
                        ks=None if skew is None else skew.mean_pairwise_ks,
                        quantity_std=None if skew is None else skew.quantity_std,
                        cross_matrix=result.cross_matrix,
                    ))
                accuracies = [t.test_accuracy for t in trials]
                cells[key] = CellResult(
                    plan.id, entry.id, entry.method.value, entry.mitigations, tuple(trials),
                    mean_accuracy=float(np.mean(accuracies)), std_accuracy=_sample_std(accuracies),
                )
                logger.info(
                    f"Cell {plan.id} / {entry.id}: accuracy {cells[key].mean_accuracy:.4f} "
                    f"+- {cells[key].std_accuracy:.4f}"
                )
            except Exception as e:
                logger.warning(f"Cell {plan.id} / {entry.id} failed: {e}")
                cells[key] = CellResult(plan.id, entry.id, entry.method.value, entry.mitigations, (), error=str(e))

    ordered = []
    for plan in cfg.partitions:
        for entry in cfg.protocols:
            cell = cells[(plan.id, entry.id)]
            ref, label = _reference_cell(cfg, cells, plan.id, entry.id)
            if ref is not None and cell.error is None:
                paired = {t.trial: t.test_accuracy for t in ref.trials}
                trials = tuple(
                    t.with_drop_rate(drop_rate(t.test_accuracy, paired[t.trial]) if paired.get(t.trial, 0) > 0 else None)
                    for t in cell.trials
                )
                cell = cell.with_drop_rate(drop_rate(cell.mean_accuracy, ref.mean_accuracy), label, trials)
            ordered.append(cell)

    return ExperimentReport(
        name=cfg.name,
        reference=None if cfg.reference is None else dict(cfg.reference),
        repeats=cfg.repeats,
        partitions=tuple(summaries),
        cells=tuple(ordered),
    )
