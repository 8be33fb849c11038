"""
Unit tests for partition presets and seed derivation
"""

import pytest
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.presets import (
    BINARY_SIZES,
    BINARY_STD,
    FOUR_CATEGORY_SIZES,
    FOUR_CATEGORY_STD,
    PRESETS,
    expand_preset,
    scale_sizes,
)
from src.seeding import derive_seed
from src.skew import PartitionPlan, Regime, quantity_std


class TestQuantityTables:
    """Test suite for the quantity size tables"""

    @pytest.mark.parametrize("split", [1, 2, 3, 4])
    def test_four_category_std(self, split):
        """Test each four-category row reproduces its tabulated STD"""
        assert quantity_std(FOUR_CATEGORY_SIZES[split]) == pytest.approx(FOUR_CATEGORY_STD[split], abs=0.1)

    @pytest.mark.parametrize("split", [1, 2, 3, 4])
    def test_binary_std(self, split):
        """Test each binary row reproduces its tabulated STD"""
        assert quantity_std(BINARY_SIZES[split]) == pytest.approx(BINARY_STD[split], abs=0.5)

    def test_rows_share_a_total(self):
        """Test every split of a table has the same pool size"""
        assert {sum(sizes) for sizes in FOUR_CATEGORY_SIZES.values()} == {1896}
        assert {sum(sizes) for sizes in BINARY_SIZES.values()} == {6000}

    # Tests for scale_sizes()
    def test_scale_sizes_keeps_total(self):
        """Test rescaling preserves the total and the ordering"""
        scaled = scale_sizes(FOUR_CATEGORY_SIZES[2], 800)

        assert sum(scaled) == 800
        assert list(scaled) == sorted(scaled)

    def test_scale_sizes_minimum_one(self):
        """Test tiny institutions keep at least one sample"""
        scaled = scale_sizes(FOUR_CATEGORY_SIZES[4], 20)

        assert min(scaled) >= 1
        assert sum(scaled) == 20

    def test_scale_sizes_too_small_total(self):
        """Test a total below the institution count is rejected"""
        with pytest.raises(ValueError, match="at least one sample"):
            scale_sizes((1, 2, 3), 2)


class TestPresets:
    """Test suite for named presets"""

    def test_every_preset_parses(self):
        """Test each preset expands into a valid plan"""
        for name in PRESETS:
            plan = PartitionPlan.from_dict({"preset": name})
            assert plan.n == 4

    def test_resolution_ladder(self):
        """Test the resolution recipe assigns factors 4, 3, 2, 1"""
        plan = PartitionPlan.from_dict({"preset": "acquisition-2"})

        assert plan.regime == Regime.ACQUISITION
        assert [chain[0]["factor"] for chain in plan.transforms] == [4, 3, 2, 1]

    def test_expand_returns_copy(self):
        """Test mutating an expansion leaves the registry untouched"""
        expanded = expand_preset("quantity-four-2")
        expanded["proportions"].append(1)

        assert len(PRESETS["quantity-four-2"]["proportions"]) == 4

    def test_unknown_preset(self):
        """Test unknown names are rejected"""
        with pytest.raises(ValueError, match="Unknown preset 'quantity-five-1'"):
            expand_preset("quantity-five-1")


class TestDeriveSeed:
    """Test suite for derive_seed"""

    def test_stable_and_distinct(self):
        """Test the same parts give the same seed and different parts differ"""
        assert derive_seed(0, "model") == derive_seed(0, "model")
        assert derive_seed(0, "model") != derive_seed(0, "data")
        assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)

    def test_range(self):
        """Test seeds fit in 63 bits"""
        for parts in [(0,), ("x", 1), (2**40, "split")]:
            assert 0 <= derive_seed(*parts) < 2**63
