"""
Experiment reports: structured results, results.json persistence and the
CSV / SVG renderings derived from it.

Everything except results.json is rendered from the parsed results.json
alone, so re-rendering an existing results directory reproduces the same
bytes.
"""

import json
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .skew import SkewReport  # noqa: E402

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

RESULTS_SCHEMA = "fedskew-results/1"
CSV_COLUMNS = [
    "partition_id", "protocol", "mitigations", "trial", "seed",
    "test_accuracy", "drop_rate", "ks", "quantity_std",
]
MATRIX_COLUMNS = ["partition_id", "protocol", "trial", "model_institution", "test_institution", "accuracy"]
ANNOTATION_THRESHOLD = 1.0

plt.rcParams.update({
    "svg.fonttype": "none",
    "svg.hashsalt": "fedskew",
    "font.size": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
})


@dataclass(frozen=True)
class TrialResult:
    trial: int
    seed: int
    test_accuracy: float
    selected_round: Optional[int]
    ks: Optional[float] = None
    quantity_std: Optional[float] = None
    cross_matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    drop_rate: Optional[float] = None

    def with_drop_rate(self, value: Optional[float]) -> "TrialResult":
        return replace(self, drop_rate=value)

    def to_dict(self) -> Dict:
        data = {
            "trial": self.trial,
            "seed": self.seed,
            "test_accuracy": self.test_accuracy,
            "selected_round": self.selected_round,
            "ks": self.ks,
            "quantity_std": self.quantity_std,
            "drop_rate": self.drop_rate,
        }
        if self.cross_matrix is not None:
            data["cross_matrix"] = [list(row) for row in self.cross_matrix]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TrialResult":
        matrix = data.get("cross_matrix")
        return cls(
            trial=int(data["trial"]),
            seed=int(data["seed"]),
            test_accuracy=float(data["test_accuracy"]),
            selected_round=data.get("selected_round"),
            ks=data.get("ks"),
            quantity_std=data.get("quantity_std"),
            cross_matrix=None if matrix is None else tuple(tuple(float(v) for v in row) for row in matrix),
            drop_rate=data.get("drop_rate"),
        )


@dataclass(frozen=True)
class CellResult:
    """All trials of one (partition, protocol) pair."""

    partition: str
    protocol: str
    method: str
    mitigations: str
    trials: Tuple[TrialResult, ...]
    mean_accuracy: Optional[float] = None
    std_accuracy: Optional[float] = None
    drop_rate: Optional[float] = None
    reference: Optional[str] = None
    error: Optional[str] = None

    def with_drop_rate(self, value: float, reference: str, trials: Tuple[TrialResult, ...]) -> "CellResult":
        return replace(self, drop_rate=value, reference=reference, trials=trials)

    def to_dict(self) -> Dict:
        data = {
            "partition": self.partition,
            "protocol": self.protocol,
            "method": self.method,
            "mitigations": self.mitigations,
            "trials": [t.to_dict() for t in self.trials],
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "drop_rate": self.drop_rate,
            "reference": self.reference,
        }
        if self.error is not None:
            data["error"] = self.error
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "CellResult":
        return cls(
            partition=str(data["partition"]),
            protocol=str(data["protocol"]),
            method=str(data["method"]),
            mitigations=str(data["mitigations"]),
            trials=tuple(TrialResult.from_dict(t) for t in data["trials"]),
            mean_accuracy=data.get("mean_accuracy"),
            std_accuracy=data.get("std_accuracy"),
            drop_rate=data.get("drop_rate"),
            reference=data.get("reference"),
            error=data.get("error"),
        )


@dataclass(frozen=True)
class PartitionSummary:
    id: str
    regime: str
    skew: Optional[SkewReport] = None

    def to_dict(self) -> Dict:
        return {"id": self.id, "regime": self.regime, "skew": None if self.skew is None else self.skew.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict) -> "PartitionSummary":
        skew = data.get("skew")
        return cls(str(data["id"]), str(data["regime"]), None if skew is None else SkewReport.from_dict(skew))


@dataclass(frozen=True)
class ExperimentReport:
    """Per-partition skew reports and per-cell accuracy summaries of an experiment."""

    name: str
    reference: Optional[Dict[str, str]]
    repeats: int
    partitions: Tuple[PartitionSummary, ...] = ()
    cells: Tuple[CellResult, ...] = ()

    def to_dict(self) -> Dict:
        return {
            "schema": RESULTS_SCHEMA,
            "name": self.name,
            "reference": self.reference,
            "repeats": self.repeats,
            "partitions": [p.to_dict() for p in self.partitions],
            "cells": [c.to_dict() for c in self.cells],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentReport":
        validate_results(data)
        return cls(
            name=str(data["name"]),
            reference=data.get("reference"),
            repeats=int(data["repeats"]),
            partitions=tuple(PartitionSummary.from_dict(p) for p in data["partitions"]),
            cells=tuple(CellResult.from_dict(c) for c in data["cells"]),
        )


def validate_results(data: Dict) -> None:
    """Check the results.json structure, raising ValueError naming the first problem."""
    if not isinstance(data, dict):
        raise ValueError("results: expected an object")
    if data.get("schema") != RESULTS_SCHEMA:
        raise ValueError(f"results.schema: expected '{RESULTS_SCHEMA}', got {data.get('schema')!r}")
    for key, kind in (("name", str), ("repeats", int), ("partitions", list), ("cells", list)):
        if not isinstance(data.get(key), kind):
            raise ValueError(f"results.{key}: missing or of the wrong type")
    for i, partition in enumerate(data["partitions"]):
        for key in ("id", "regime"):
            if not isinstance(partition, dict) or not isinstance(partition.get(key), str):
                raise ValueError(f"results.partitions[{i}].{key}: missing")
    for i, cell in enumerate(data["cells"]):
        if not isinstance(cell, dict):
            raise ValueError(f"results.cells[{i}]: expected an object")
        for key in ("partition", "protocol", "method", "mitigations"):
            if not isinstance(cell.get(key), str):
                raise ValueError(f"results.cells[{i}].{key}: missing")
        if not isinstance(cell.get("trials"), list):
            raise ValueError(f"results.cells[{i}].trials: missing")
        for j, trial in enumerate(cell["trials"]):
            for key in ("trial", "seed", "test_accuracy"):
                if not isinstance(trial, dict) or key not in trial:
                    raise ValueError(f"results.cells[{i}].trials[{j}].{key}: missing")


def load_results(path: Union[str, Path]) -> Dict:
    """Read and validate a results.json file (or the results.json inside a directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / "results.json"
    if not path.exists():
        raise FileNotFoundError(f"Results file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: syntax error at line {e.lineno} column {e.colno}: {e.msg}")
    validate_results(data)
    return data


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def results_table(results: Dict) -> pd.DataFrame:
    """One row per (cell, trial); failed cells contribute no rows."""
    rows = []
    for cell in results["cells"]:
        for trial in cell["trials"]:
            rows.append({
                "partition_id": cell["partition"],
                "protocol": cell["protocol"],
                "mitigations": cell["mitigations"],
                "trial": trial["trial"],
                "seed": trial["seed"],
                "test_accuracy": trial["test_accuracy"],
                "drop_rate": trial.get("drop_rate"),
                "ks": trial.get("ks"),
                "quantity_std": trial.get("quantity_std"),
            })
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def matrix_table(results: Dict) -> pd.DataFrame:
    rows = []
    for cell in results["cells"]:
        for trial in cell["trials"]:
            for i, row in enumerate(trial.get("cross_matrix") or []):
                for j, value in enumerate(row):
                    rows.append({
                        "partition_id": cell["partition"],
                        "protocol": cell["protocol"],
                        "trial": trial["trial"],
                        "model_institution": i,
                        "test_institution": j,
                        "accuracy": value,
                    })
    return pd.DataFrame(rows, columns=MATRIX_COLUMNS)


def _safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _figure_regime(results: Dict, regime: str, path: Path) -> None:
    """Grouped bars: partitions on the x axis, one bar per protocol, std whiskers."""
    partition_ids = [p["id"] for p in results["partitions"] if p["regime"] == regime]
    protocols: List[str] = []
    for cell in results["cells"]:
        if cell["protocol"] not in protocols:
            protocols.append(cell["protocol"])
    cells = {(c["partition"], c["protocol"]): c for c in results["cells"]}

    fig, ax = plt.subplots(figsize=(max(6.0, 1.6 * len(partition_ids) * max(1, len(protocols)) / 2), 4.5))
    x = np.arange(len(partition_ids))
    width = 0.8 / max(1, len(protocols))

    for k, protocol in enumerate(protocols):
        means, stds = [], []
        for pid in partition_ids:
            cell = cells.get((pid, protocol))
            ok = cell is not None and cell.get("mean_accuracy") is not None
            means.append(cell["mean_accuracy"] if ok else 0.0)
            stds.append(cell["std_accuracy"] if ok else 0.0)
        positions = x - 0.4 + width * (k + 0.5)
        ax.bar(positions, means, width, yerr=stds, capsize=3, label=protocol)

        for pos, pid, mean, std in zip(positions, partition_ids, means, stds):
            cell = cells.get((pid, protocol))
            rate = None if cell is None else cell.get("drop_rate")
            if rate is not None and rate > ANNOTATION_THRESHOLD:
                ax.text(pos, mean + std + 0.01, f"drop {rate:.1f}%", ha="center", va="bottom",
                        rotation=90, fontsize=7)

    ax.set_xticks(x)
    ax.set_xticklabels(partition_ids)
    ax.set_ylim(0.0, 1.25)
    ax.set_ylabel("test accuracy")
    reference = results.get("reference")
    suffix = ""
    if reference:
        kind, ref_id = next(iter(reference.items()))
        suffix = f" (drop rates relative to {kind} {ref_id})"
    ax.set_title(f"{regime} skew{suffix}")
    ax.legend(loc="upper right", ncol=min(3, max(1, len(protocols))))
    ax.grid(axis="y", alpha=0.3)
    _save_svg(fig, path)


def _figure_matrix(matrix: np.ndarray, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    image = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", color="white", fontsize=8)
    ax.set_xticks(range(matrix.shape[1]))
    ax.set_yticks(range(matrix.shape[0]))
    ax.set_xlabel("test shard institution")
    ax.set_ylabel("model institution")
    ax.set_title(title)
    fig.colorbar(image, ax=ax)
    _save_svg(fig, path)


def render_report(results: Dict, out_dir: Union[str, Path]) -> List[Path]:
    """
    Write results.csv, one grouped-bar SVG per skew regime, and the
    cross-institution matrix table and heatmaps when matrices were collected.

    A pure function of the results dictionary.

    Raises:
        ValueError: If the results are malformed or a file cannot be written
    """
    validate_results(results)
    out_dir = Path(out_dir)
    try:
        written = _write_report_files(results, out_dir)
    except OSError as e:
        logger.error(f"Failed to write report to {out_dir}: {e}")
        raise ValueError(f"Cannot write report to {out_dir}: {e}")
    logger.info(f"Rendered {len(written)} report files into {out_dir}")
    return written


def _write_report_files(results: Dict, out_dir: Path) -> List[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out_dir / "results.csv"
    results_table(results).to_csv(csv_path, index=False)
    written.append(csv_path)

    regimes = []
    for partition in results["partitions"]:
        if partition["regime"] not in regimes:
            regimes.append(partition["regime"])
    if results["cells"]:
        for regime in regimes:
            path = out_dir / f"figure_{regime}.svg"
            _figure_regime(results, regime, path)
            written.append(path)

    matrices = matrix_table(results)
    if not matrices.empty:
        path = out_dir / "cross_matrix.csv"
        matrices.to_csv(path, index=False)
        written.append(path)
        for cell in results["cells"]:
            stacked = [np.asarray(t["cross_matrix"]) for t in cell["trials"] if t.get("cross_matrix")]
            if not stacked:
                continue
            path = out_dir / f"cross_matrix_{_safe_name(cell['partition'])}_{_safe_name(cell['protocol'])}.svg"
            _figure_matrix(np.mean(stacked, axis=0), f"{cell['partition']} / {cell['protocol']}", path)
            written.append(path)
    return written


def emit_report(report: Union[ExperimentReport, Dict], out_dir: Union[str, Path]) -> List[Path]:
    """Write results.json and everything rendered from it."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        data = report.to_dict() if isinstance(report, ExperimentReport) else report
        text = json.dumps(data, indent=2, sort_keys=True) + "\n"
        json_path = out_dir / "results.json"
        json_path.write_text(text)
    except OSError as e:
        logger.error(f"Failed to write report to {out_dir}: {e}")
        raise ValueError(f"Cannot write report to {out_dir}: {e}")
    return [json_path] + render_report(json.loads(text), out_dir)
