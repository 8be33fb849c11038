"""
End-to-end acceptance checks on the synthetic task.

The exact checks run by default. The directional findings train tiny-conv
models for four trials per cell and only run with --runslow.
"""

import pytest
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.datasets import SynthSpec, concat_datasets, stratified_split, synth_generate
from src.evaluation import accuracy
from src.experiment import config_from_dict, run_experiment
from src.federation import ProtocolConfig, run_centralized, run_fedsgd
from src.network import build_model, gradient_check, mlp_arch, tiny_conv_arch
from src.presets import FOUR_CATEGORY_SIZES, scale_sizes
from src.skew import partition_quantity


def experiment(partitions, protocols, epochs=8):
    cfg = config_from_dict({
        "name": "acceptance",
        "dataset": {"synth": {"num_categories": 4, "per_category": 400, "image_size": [16, 16], "seed": 11}},
        "arch": {"name": "tiny-conv"},
        "training": {"batch_size": 16, "epochs": epochs, "learning_rate": 0.05},
        "partitions": partitions,
        "protocols": protocols,
        "repeats": 4,
    })
    report = run_experiment(cfg)
    for cell in report.cells:
        assert cell.error is None, f"{cell.partition} / {cell.protocol}: {cell.error}"
    return {(c.partition, c.protocol): c.mean_accuracy for c in report.cells}


class TestExactChecks:
    """Test suite for the exact acceptance checks"""

    @pytest.mark.parametrize("seed", range(10))
    def test_composed_gradient(self, seed):
        """Test the tiny-conv gradient against finite differences for ten seeds"""
        model = build_model(tiny_conv_arch((1, 8, 8), 4), seed=seed)
        rng = np.random.default_rng(100 + seed)
        images = rng.uniform(size=(3, 1, 8, 8))
        labels = rng.integers(0, 4, size=3)

        assert gradient_check(model, images, labels)["relative_error"] < 1e-6

    def test_weighted_fedsgd_tracks_centralized_under_quantity_skew(self):
        """Test 20 full-batch FedSGD+WP steps on scaled split 4 sizes stay within 1e-9"""
        pool = synth_generate(SynthSpec(4, (100,) * 4, image_size=(4, 4), seed=12))
        sizes = scale_sizes(FOUR_CATEGORY_SIZES[4], len(pool))
        shards = partition_quantity(pool, sizes, seed=0)
        pooled = concat_datasets([s.train for s in shards])
        arch = mlp_arch((1, 4, 4), 4, hidden=8)

        def cfg(method, wp=False):
            return ProtocolConfig(method=method, wp=wp, batch_size=None, epochs=20, learning_rate=0.1, trace=True)

        central = run_centralized(pooled, cfg("centralized"), arch)
        weighted = run_fedsgd(shards, cfg("fedsgd", wp=True), arch)
        uniform = run_fedsgd(shards, cfg("fedsgd"), arch)

        weighted_gap = max(np.max(np.abs(a - b)) for a, b in zip(weighted.trace, central.trace))
        uniform_gap = max(np.max(np.abs(a - b)) for a, b in zip(uniform.trace, central.trace))
        assert len(weighted.trace) == len(central.trace) == 20
        assert weighted_gap < 1e-9
        assert uniform_gap > 1e-6


@pytest.mark.slow
class TestDirectionalFindings:
    """Test suite for the qualitative skew findings"""

    def test_calibration_gate(self):
        """Test centralized tiny-conv training clears 95% on the IID synthetic task"""
        ds = synth_generate(SynthSpec(4, (400,) * 4, image_size=(16, 16), seed=1))
        train, val, test = stratified_split(ds, (0.5, 0.25, 0.25), seed=0)
        cfg = ProtocolConfig(method="centralized", batch_size=16, epochs=10, learning_rate=0.05)
        run = run_centralized(train, cfg, tiny_conv_arch((1, 16, 16), 4), val_sets=[val])

        assert accuracy(run.model, test) > 0.95

    def test_quantity_skew(self):
        """Test quantity skew hurts FedSGD and CWT and WP recovers at least half"""
        means = experiment(
            [{"preset": "quantity-four-1"}, {"preset": "quantity-four-4"}],
            [{"method": "fedsgd"}, {"method": "fedsgd", "wp": True}, {"method": "cwt"}, {"method": "cwt", "wp": True}],
        )

        for method in ("fedsgd", "cwt"):
            balanced = means[("quantity-four-1", method)]
            skewed = means[("quantity-four-4", method)]
            recovered = means[("quantity-four-4", f"{method}+WP")]
            assert skewed < balanced
            assert recovered - skewed >= 0.5 * (balanced - skewed)

    def test_label_skew(self):
        """Test label skew hurts every protocol and WL and BN averaging help"""
        means = experiment(
            [{"preset": "label-1"}, {"preset": "label-4"}],
            [
                {"method": "fedsgd"},
                {"method": "fedavg"},
                {"method": "cwt"},
                {"method": "cwt", "wl": True},
                {"method": "fedavg", "wl": True},
                {"method": "fedavg", "wl": True, "bn_avg": True},
            ],
        )

        for method in ("fedsgd", "fedavg", "cwt"):
            assert means[("label-4", method)] < means[("label-1", method)]
        assert means[("label-4", "cwt+WL")] > means[("label-4", "cwt")]
        assert means[("label-4", "fedavg+WL+BN")] > means[("label-4", "fedavg+WL")]

    def test_acquisition_skew(self):
        """Test the resolution and noise recipes each lower every protocol's accuracy"""
        means = experiment(
            [{"preset": "acquisition-1"}, {"preset": "acquisition-2"}, {"preset": "acquisition-3"}],
            [{"method": "fedsgd"}, {"method": "fedavg"}, {"method": "cwt"}],
        )

        for method in ("fedsgd", "fedavg", "cwt"):
            clean = means[("acquisition-1", method)]
            assert means[("acquisition-2", method)] < clean
            assert means[("acquisition-3", method)] < clean
