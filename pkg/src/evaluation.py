"""
Evaluation: accuracy, cross-institution accuracy matrix, drop rates and
the validation metric used for model selection.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datasets import LabeledDataset, concat_datasets
from .losses import class_weights, weighted_ce
from .network import ModelState, infer_logits


def accuracy(model: ModelState, ds: LabeledDataset) -> float:
    """
    Fraction of samples whose argmax prediction equals the label.

    Ties between logits go to the lowest category index.

    Raises:
        ValueError: If the dataset is empty
    """
    if ds is None or len(ds) == 0:
        raise ValueError("Cannot compute accuracy on an empty dataset")
    logits = infer_logits(model, ds.images)
    predictions = np.argmax(logits, axis=1)
    return float(np.mean(predictions == ds.labels))


def cross_institution_matrix(
    models: Sequence[ModelState],
    test_shards: Sequence[LabeledDataset]
) -> np.ndarray:
    """
    Accuracy of every institution's model on every institution's test shard.

    Entry (i, j) is accuracy(models[i], test_shards[j]).
    """
    if len(models) != len(test_shards):
        raise ValueError(f"{len(models)} models but {len(test_shards)} test shards")
    matrix = np.zeros((len(models), len(test_shards)))
    for i, model in enumerate(models):
        for j, shard in enumerate(test_shards):
            matrix[i, j] = accuracy(model, shard)
    return matrix


def drop_rate(acc: float, ref_acc: float) -> float:
    """Relative accuracy drop in percent: 100 * (ref - acc) / ref. Negative means improvement."""
    if not ref_acc > 0:
        raise ValueError(f"Reference accuracy must be positive, got {ref_acc}")
    return 100.0 * (ref_acc - acc) / ref_acc


def selection_metric(model: ModelState, val_sets: Sequence[LabeledDataset], wl: bool) -> float:
    """
    Mean validation loss over the pooled validation shards (lower is better).

    With wl the loss is class-weighted using the pooled validation histogram.
    """
    val_sets = [v for v in val_sets if v is not None and len(v) > 0]
    if not val_sets:
        raise ValueError("Selection metric needs non-empty validation data")
    pooled = concat_datasets(val_sets) if len(val_sets) > 1 else val_sets[0]
    weights = class_weights(pooled.histogram()) if wl else None
    loss, _ = weighted_ce(infer_logits(model, pooled.images), pooled.labels, weights)
    return loss


@dataclass(frozen=True)
class RunResult:
    """Evaluated outcome of one protocol run."""

    method: str
    mitigations: str
    test_accuracy: float
    selected_round: Optional[int]
    logs: Tuple[Dict, ...]
    cross_matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    drop_rate: Optional[float] = None
    reference: Optional[str] = None
    seeds: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"Accuracy must lie in [0, 1], got {self.test_accuracy}")
        if self.cross_matrix is not None and any(len(row) != len(self.cross_matrix) for row in self.cross_matrix):
            raise ValueError("Cross-institution matrix must be square")

    def with_drop_rate(self, ref_acc: float, reference: str) -> "RunResult":
        return RunResult(
            self.method, self.mitigations, self.test_accuracy, self.selected_round, self.logs,
            self.cross_matrix, drop_rate(self.test_accuracy, ref_acc), reference, dict(self.seeds),
        )

    def to_dict(self) -> Dict:
        data = {
            "method": self.method,
            "mitigations": self.mitigations,
            "test_accuracy": self.test_accuracy,
            "selected_round": self.selected_round,
            "rounds": list(self.logs),
            "seeds": dict(self.seeds),
        }
        if self.cross_matrix is not None:
            data["cross_matrix"] = [list(row) for row in self.cross_matrix]
        if self.drop_rate is not None:
            data["drop_rate"] = self.drop_rate
            data["reference"] = self.reference
        return data


def evaluate_run(
    run,
    test_sets: Sequence[LabeledDataset],
    method: str,
    mitigations: str,
    with_matrix: bool = False,
    seeds: Optional[Dict[str, int]] = None
) -> RunResult:
    """
    Score a protocol run on the institutional test shards.

    Test accuracy uses the selected model on the pooled test shards; the
    matrix uses each institution's selected model (a single travelling
    model is repeated for every row).
    """
    test_sets = [t for t in test_sets if t is not None and len(t) > 0]
    if not test_sets:
        raise ValueError("No test data to evaluate on")
    pooled = concat_datasets(test_sets) if len(test_sets) > 1 else test_sets[0]
    matrix = None
    if with_matrix:
        models: List[ModelState] = list(run.institution_models)
        if len(models) == 1 and len(test_sets) > 1:
            models = models * len(test_sets)
        matrix = tuple(tuple(float(v) for v in row) for row in cross_institution_matrix(models, test_sets))
    return RunResult(
        method=method,
        mitigations=mitigations,
        test_accuracy=accuracy(run.model, pooled),
        selected_round=run.selected_round,
        logs=tuple(log.to_dict() for log in run.logs),
        cross_matrix=matrix,
        seeds=dict(seeds or {}),
    )
