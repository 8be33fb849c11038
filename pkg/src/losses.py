"""
Cross-entropy losses with per-category weights.

The weighted loss scales each sample's negative log-likelihood by the
weight of its true category, where weights come from the local category
counts: alpha_j = max(n_1, ..., n_C) / n_j.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax


@dataclass(frozen=True)
class CategoryWeights:
    """Per-category loss weights, one positive value per category."""

    alphas: Tuple[float, ...]

    def __post_init__(self):
        if len(self.alphas) < 1:
            raise ValueError("CategoryWeights needs at least one category")
        if any(not np.isfinite(a) or a <= 0 for a in self.alphas):
            raise ValueError(f"Category weights must be finite and positive, got {self.alphas}")

    def __len__(self) -> int:
        return len(self.alphas)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.alphas, dtype=np.float64)

    @classmethod
    def uniform(cls, num_categories: int) -> "CategoryWeights":
        return cls(tuple([1.0] * num_categories))


def class_weights(counts: Sequence[int]) -> CategoryWeights:
    """
    Compute category weights from per-category sample counts.

    Args:
        counts: Number of samples per category, n_1..n_C

    Returns:
        CategoryWeights with alpha_j = max(counts) / n_j

    Raises:
        ValueError: If fewer than two categories are given or any count is zero
    """
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError(f"class_weights needs at least 2 category counts, got {counts.tolist()}")
    if np.any(counts < 0):
        raise ValueError(f"Category counts must be non-negative, got {counts.tolist()}")

    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(
            f"Category weight undefined: categories {missing.tolist()} have zero samples"
        )

    largest = float(counts.max())
    return CategoryWeights(tuple(largest / float(n) for n in counts))


def _check_inputs(logits: np.ndarray, labels: np.ndarray, weights: Optional[CategoryWeights]):
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x K, got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ValueError(
            f"labels must have one entry per logit row: {labels.shape} vs {logits.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    if weights is not None and len(weights) != logits.shape[1]:
        raise ValueError(
            f"{len(weights)} category weights given for {logits.shape[1]} categories"
        )


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Unweighted cross-entropy: (batch mean, per-sample losses)."""
    return weighted_ce(logits, labels, None)


def weighted_ce(
    logits: np.ndarray,
    labels: np.ndarray,
    weights: Optional[CategoryWeights] = None
) -> Tuple[float, np.ndarray]:
    """
    Class-weighted cross-entropy.

    Args:
        logits: N x K raw scores
        labels: N category indices
        weights: Per-category weights, or None for plain cross-entropy

    Returns:
        (mean loss over the batch, per-sample losses -alpha_y * log p_y)
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_inputs(logits, labels, weights)

    log_probs = log_softmax(logits, axis=1)
    per_sample = -log_probs[np.arange(labels.size), labels]
    if weights is not None:
        per_sample = weights.as_array()[labels] * per_sample
    return float(np.mean(per_sample)), per_sample


def weighted_ce_grad(
    logits: np.ndarray,
    labels: np.ndarray,
    weights: Optional[CategoryWeights] = None
) -> np.ndarray:
    """Gradient of the mean weighted cross-entropy with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_inputs(logits, labels, weights)

    n = labels.size
    grad = softmax(logits, axis=1)
    grad[np.arange(n), labels] -= 1.0
    if weights is not None:
        grad = weights.as_array()[labels][:, None] * grad
    return grad / n


if __name__ == "__main__":
    # Example usage
    for counts in ([5, 5, 5, 5], [10, 5], [100, 50, 25, 25]):
        print(f"counts={counts} -> alphas={class_weights(counts).alphas}")

    logits = np.array([[2.0, -1.0, 0.5, 0.0]])
    loss, _ = weighted_ce(logits, np.array([2]), class_weights([100, 50, 25, 25]))
    print(f"weighted loss for label 2: {loss:.6f}")
