"""
Unit tests for accuracy, cross-institution matrices, drop rates and the selection metric
"""

import pytest
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.datasets import LabeledDataset, SynthSpec, concat_datasets, synth_generate
from src.evaluation import (
    RunResult,
    accuracy,
    cross_institution_matrix,
    drop_rate,
    evaluate_run,
    selection_metric,
)
from src.federation import ProtocolConfig, run_centralized, run_fedavg
from src.losses import class_weights, weighted_ce
from src.network import build_model, forward, mlp_arch, mlp_bn_arch
from src.skew import partition_quantity


@pytest.fixture
def arch():
    """Small MLP over 4x4 images and three categories"""
    return mlp_arch((1, 4, 4), 3, hidden=5)


def constant_model(arch, category, strength=5.0):
    """A model whose logits ignore the input and favour one category."""
    model = build_model(arch, seed=0)
    params = {name: np.zeros_like(value) for name, value in model.params.items()}
    params["dense2.bias"] = np.where(np.arange(3) == category, strength, 0.0)
    return model.with_params(params)


def single_category(category, n=6, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.uniform(size=(n, 1, 4, 4)), [category] * n, 3, np.arange(n))


class TestAccuracy:
    """Test suite for accuracy"""

    def test_constant_prediction_right_category(self, arch):
        """Test a constant predictor scores 1 on its own category"""
        assert accuracy(constant_model(arch, 2), single_category(2)) == 1.0

    def test_constant_prediction_wrong_category(self, arch):
        """Test a constant predictor scores 0 on another category"""
        assert accuracy(constant_model(arch, 2), single_category(1)) == 0.0

    def test_ties_go_to_lowest_category(self, arch):
        """Test all-equal logits predict category 0"""
        model = constant_model(arch, 0, strength=0.0)

        assert accuracy(model, single_category(0)) == 1.0

    def test_matches_hand_scoring(self, arch):
        """Test a random model on a ten-sample fixture"""
        model = build_model(arch, seed=7)
        ds = synth_generate(SynthSpec(3, (4, 3, 3), image_size=(4, 4), seed=2))
        logits, _ = forward(model, ds.images)
        correct = sum(int(np.argmax(row) == label) for row, label in zip(logits, ds.labels))

        assert accuracy(model, ds) == correct / 10

    def test_permutation_invariant(self, arch):
        """Test sample order does not matter"""
        model = build_model(arch, seed=7)
        ds = synth_generate(SynthSpec(3, (10, 10, 10), image_size=(4, 4), seed=2))

        assert accuracy(model, ds) == accuracy(model, ds.subset(np.arange(len(ds))[::-1]))

    def test_empty_dataset(self, arch):
        """Test an empty dataset is rejected"""
        with pytest.raises(ValueError, match="empty"):
            accuracy(build_model(arch, 0), single_category(0).subset([]))


class TestCrossInstitutionMatrix:
    """Test suite for cross_institution_matrix"""

    def test_identical_models_give_identical_rows(self, arch):
        """Test rows coincide when the models do"""
        model = build_model(arch, seed=1)
        shards = [single_category(c, seed=c) for c in range(3)]
        matrix = cross_institution_matrix([model] * 3, shards)

        assert matrix.shape == (3, 3)
        for row in matrix[1:]:
            np.testing.assert_array_equal(row, matrix[0])

    def test_single_institution(self, arch):
        """Test n = 1 gives plain accuracy"""
        model = constant_model(arch, 1)
        shard = single_category(1)

        assert cross_institution_matrix([model], [shard]).tolist() == [[accuracy(model, shard)]]

    def test_entries(self, arch):
        """Test entry (i, j) scores model i on shard j"""
        models = [constant_model(arch, c) for c in range(3)]
        shards = [single_category(c) for c in range(3)]

        np.testing.assert_array_equal(cross_institution_matrix(models, shards), np.eye(3))

    def test_count_mismatch(self, arch):
        """Test differing model and shard counts are rejected"""
        with pytest.raises(ValueError, match="2 models but 1 test shards"):
            cross_institution_matrix([build_model(arch, 0)] * 2, [single_category(0)])

    def test_bn_averaged_fedavg_rows_agree(self):
        """Test BN-averaged FedAVG institutions score identically everywhere"""
        pool = synth_generate(SynthSpec(3, (40, 40, 40), image_size=(4, 4), seed=3))
        test = synth_generate(SynthSpec(3, (10, 10, 10), image_size=(4, 4), seed=4))
        shards = partition_quantity(pool, [30, 90], seed=0, test=test)
        cfg = ProtocolConfig(method="fedavg", bn_avg=True, batch_size=6, epochs=2, learning_rate=0.1)
        run = run_fedavg(shards, cfg, mlp_bn_arch((1, 4, 4), 3, hidden=5))
        matrix = cross_institution_matrix(run.institution_models, [s.test for s in shards])

        assert np.max(np.abs(matrix - matrix[0])) == 0.0


class TestDropRate:
    """Test suite for drop_rate"""

    def test_equal_accuracy(self):
        """Test no drop"""
        assert drop_rate(0.8, 0.8) == 0.0

    def test_drop(self):
        """Test a relative drop of ten percent"""
        assert drop_rate(0.72, 0.80) == pytest.approx(10.0)

    def test_improvement_is_negative(self):
        """Test an improvement gives a negative rate"""
        assert drop_rate(0.84, 0.80) == pytest.approx(-5.0)

    def test_decreasing_in_accuracy(self):
        """Test the rate decreases as accuracy grows"""
        rates = [drop_rate(a, 0.6) for a in (0.1, 0.3, 0.5, 0.7)]

        assert rates == sorted(rates, reverse=True)

    def test_zero_reference_rejected(self):
        """Test a non-positive reference is rejected"""
        with pytest.raises(ValueError, match="positive"):
            drop_rate(0.5, 0.0)


class TestSelectionMetric:
    """Test suite for selection_metric"""

    def test_weighted_on_balanced_equals_plain(self, arch):
        """Test WL is a no-op on a balanced validation pool"""
        model = build_model(arch, seed=3)
        val = synth_generate(SynthSpec(3, (8, 8, 8), image_size=(4, 4), seed=5))

        assert selection_metric(model, [val], wl=True) == selection_metric(model, [val], wl=False)

    def test_perfect_prediction_is_zero(self, arch):
        """Test a saturated correct predictor has zero loss"""
        model = constant_model(arch, 1, strength=1000.0)

        assert selection_metric(model, [single_category(1)], wl=False) == 0.0

    def test_matches_weighted_ce_on_pooled_shards(self, arch):
        """Test the metric equals weighted CE over the pooled validation shards"""
        model = build_model(arch, seed=6)
        shards = [
            synth_generate(SynthSpec(3, (2, 5, 9), image_size=(4, 4), seed=6)),
            LabeledDataset(np.zeros((4, 1, 4, 4)), [1] * 4, 3, np.arange(100, 104)),
        ]
        pooled = concat_datasets(shards)
        logits, _ = forward(model, pooled.images)
        expected, _ = weighted_ce(logits, pooled.labels, class_weights(pooled.histogram()))

        assert selection_metric(model, shards, wl=True) == pytest.approx(expected, abs=1e-12)

    def test_empty_validation_rejected(self, arch):
        """Test empty validation data is rejected"""
        with pytest.raises(ValueError, match="non-empty validation"):
            selection_metric(build_model(arch, 0), [], wl=False)


class TestRunResult:
    """Test suite for RunResult and evaluate_run"""

    def test_evaluate_run_repeats_travelling_model(self, arch):
        """Test a single model fills every matrix row"""
        pool = synth_generate(SynthSpec(3, (20, 20, 20), image_size=(4, 4), seed=1))
        run = run_centralized(pool, ProtocolConfig(method="centralized", epochs=1, batch_size=10), arch)
        tests = [single_category(c, seed=c) for c in range(3)]
        result = evaluate_run(run, tests, "centralized", "none", with_matrix=True, seeds={"model": 1})

        assert len(result.cross_matrix) == 3
        assert result.cross_matrix[0] == result.cross_matrix[2]
        assert result.test_accuracy == pytest.approx(np.mean(result.cross_matrix[0]))
        assert result.to_dict()["rounds"][0]["round"] == 0

    def test_with_drop_rate(self):
        """Test the drop rate and reference label are attached"""
        result = RunResult("fedavg", "WP", 0.72, 3, ()).with_drop_rate(0.8, "protocol:central")
        data = result.to_dict()

        assert data["drop_rate"] == pytest.approx(10.0)
        assert data["reference"] == "protocol:central"

    def test_accuracy_range(self):
        """Test accuracies outside [0, 1] are rejected"""
        with pytest.raises(ValueError, match="Accuracy"):
            RunResult("cwt", "none", 1.2, None, ())
