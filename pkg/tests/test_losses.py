"""
Unit tests for the loss functions
Tests class weights and the (weighted) cross-entropy
"""

import pytest
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.losses import CategoryWeights, class_weights, cross_entropy, weighted_ce, weighted_ce_grad


class TestClassWeights:
    """Test suite for class_weights"""

    def test_balanced_counts(self):
        """Test equal counts give unit weights"""
        assert class_weights([5, 5, 5, 5]).alphas == (1.0, 1.0, 1.0, 1.0)

    def test_skewed_counts(self):
        """Test alpha_j = max / n_j"""
        assert class_weights([10, 5]).alphas == (1.0, 2.0)
        assert class_weights([100, 50, 25, 25]).alphas == (1.0, 2.0, 4.0, 4.0)

    def test_zero_count_rejected(self):
        """Test a missing category is an error"""
        with pytest.raises(ValueError, match="zero samples"):
            class_weights([4, 0, 2])

    def test_single_category_rejected(self):
        """Test fewer than two categories is an error"""
        with pytest.raises(ValueError, match="at least 2"):
            class_weights([7])

    def test_negative_count_rejected(self):
        """Test negative counts are an error"""
        with pytest.raises(ValueError, match="non-negative"):
            class_weights([3, -1])

    def test_weights_must_be_positive(self):
        """Test CategoryWeights rejects non-positive alphas"""
        with pytest.raises(ValueError):
            CategoryWeights((1.0, 0.0))


class TestWeightedCrossEntropy:
    """Test suite for weighted_ce and its gradient"""

    @pytest.fixture
    def logits(self):
        """Random logits for six samples over three categories"""
        return np.random.default_rng(0).normal(size=(6, 3))

    @pytest.fixture
    def labels(self):
        """Labels for the logits fixture"""
        return np.array([0, 1, 2, 2, 1, 0])

    def test_uniform_weights_match_plain_loss(self, logits, labels):
        """Test unit weights reproduce the unweighted cross-entropy"""
        plain, _ = cross_entropy(logits, labels)
        weighted, _ = weighted_ce(logits, labels, CategoryWeights.uniform(3))

        assert weighted == pytest.approx(plain, abs=1e-15)

    def test_per_sample_scaling(self, logits, labels):
        """Test per-sample losses are scaled by the label's weight"""
        _, plain = cross_entropy(logits, labels)
        _, weighted = weighted_ce(logits, labels, CategoryWeights((1.0, 2.0, 3.0)))

        np.testing.assert_allclose(weighted, plain * np.array([1, 2, 3, 3, 2, 1]))

    def test_large_logits_are_stable(self):
        """Test the loss stays finite for extreme logits"""
        loss, _ = cross_entropy(np.array([[1000.0, -1000.0]]), np.array([1]))

        assert loss == pytest.approx(2000.0)

    def test_gradient_matches_finite_differences(self, logits, labels):
        """Test the logit gradient of the weighted loss"""
        weights = CategoryWeights((0.5, 2.0, 1.5))
        analytic = weighted_ce_grad(logits, labels, weights)
        numeric = np.zeros_like(logits)
        h = 1e-6
        for idx in np.ndindex(*logits.shape):
            plus, minus = logits.copy(), logits.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = (weighted_ce(plus, labels, weights)[0] - weighted_ce(minus, labels, weights)[0]) / (2 * h)

        np.testing.assert_allclose(analytic, numeric, atol=1e-8)

    def test_rejects_out_of_range_labels(self, logits):
        """Test labels outside [0, K) are rejected"""
        with pytest.raises(ValueError, match="must lie in"):
            weighted_ce(logits, np.array([0, 1, 2, 3, 0, 0]))

    def test_rejects_weight_count_mismatch(self, logits, labels):
        """Test a weight vector of the wrong length is rejected"""
        with pytest.raises(ValueError, match="category weights given"):
            weighted_ce(logits, labels, CategoryWeights((1.0, 1.0)))
