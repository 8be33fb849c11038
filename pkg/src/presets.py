"""
Named partition presets.

Quantity tables for a four-category task (1896 training samples) and a
binary task (6000 training samples), a label-skew ladder of non-IID
fractions, and three acquisition-skew recipes. Presets expand into plain
plan dictionaries; quantity presets are expressed as proportions so they
scale to whatever training pool they are applied to.
"""

import copy
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .datasets import apportion
from .transforms import dominated_mixture

# Four-category quantity table: sizes per institution and their sample STD
FOUR_CATEGORY_SIZES: Dict[int, Tuple[int, ...]] = {
    1: (474, 474, 474, 474),
    2: (299, 317, 385, 895),
    3: (113, 211, 579, 993),
    4: (66, 111, 282, 1437),
}
FOUR_CATEGORY_STD: Dict[int, float] = {1: 0.0, 2: 283.1, 3: 399.9, 4: 648.7}

# Binary-task quantity table
BINARY_SIZES: Dict[int, Tuple[int, ...]] = {
    1: (1500, 1500, 1500, 1500),
    2: (750, 960, 1800, 2490),
    3: (315, 850, 1750, 3085),
    4: (208, 350, 889, 4553),
}
BINARY_STD: Dict[int, float] = {1: 0.0, 2: 800.8, 3: 1211.0, 4: 2056.0}

# Label-skew ladder: split -> non-IID fraction
LABEL_FRACTIONS: Dict[int, float] = {1: 0.0, 2: 0.3, 3: 0.6, 4: 0.9}

RESOLUTION_FACTORS: Tuple[int, ...] = (4, 3, 2, 1)
DOMINANT_WEIGHT = 0.7


def scale_sizes(sizes: Sequence[int], total: int) -> Tuple[int, ...]:
    """
    Rescale a row of institution sizes to a new total by largest remainder.

    Every institution keeps at least one sample.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    if total < sizes.size:
        raise ValueError(f"Cannot give {sizes.size} institutions at least one sample out of {total}")
    scaled = apportion(total, sizes)
    while np.any(scaled < 1):
        low = int(np.flatnonzero(scaled < 1)[0])
        high = int(np.argmax(scaled))
        scaled[low] += 1
        scaled[high] -= 1
    return tuple(int(s) for s in scaled)


def snr_transforms() -> List[List[Dict]]:
    """
    Per-institution transform chains for the signal-to-noise skew recipe:
    gaussian noise, motion blur, a gaussian-dominated mixture and a
    blur-dominated mixture.
    """
    return [
        [{"kind": "gaussian"}],
        [{"kind": "motion_blur"}],
        [dominated_mixture("gaussian", DOMINANT_WEIGHT)],
        [dominated_mixture("motion_blur", DOMINANT_WEIGHT)],
    ]


def _build_presets() -> Dict[str, Dict]:
    presets = {}
    for split, sizes in FOUR_CATEGORY_SIZES.items():
        presets[f"quantity-four-{split}"] = {"regime": "quantity", "proportions": list(sizes)}
    for split, sizes in BINARY_SIZES.items():
        presets[f"quantity-binary-{split}"] = {"regime": "quantity", "proportions": list(sizes)}
    for split, fraction in LABEL_FRACTIONS.items():
        presets[f"label-{split}"] = {"regime": "label", "institutions": 4, "non_iid_fraction": fraction}

    presets["acquisition-1"] = {"regime": "acquisition", "transforms": [[], [], [], []]}
    presets["acquisition-2"] = {
        "regime": "acquisition",
        "transforms": [
            [{"kind": "resolution", "factor": k}] for k in RESOLUTION_FACTORS
        ],
    }
    presets["acquisition-3"] = {"regime": "acquisition", "transforms": snr_transforms()}
    return presets


PRESETS: Dict[str, Dict] = _build_presets()


def expand_preset(name: str) -> Dict:
    """Plan dictionary for a named preset (a fresh copy)."""
    if name not in PRESETS:
        raise ValueError(f"Unknown preset '{name}'; known presets: {', '.join(sorted(PRESETS))}")
    return copy.deepcopy(PRESETS[name])


if __name__ == "__main__":
    # Example usage
    for name in sorted(PRESETS):
        print(name, PRESETS[name])
    print(scale_sizes(FOUR_CATEGORY_SIZES[4], 800))
