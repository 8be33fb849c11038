"""
Skew generators and skew metrics.

Builds institution shards under quantity, label-distribution and
acquisition skew, scores partitions by the sample standard deviation of
their sizes and the mean pairwise Kolmogorov-Smirnov statistic of their
label histograms, and exports/imports partitions as JSON manifests.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datasets import LabeledDataset, apportion
from .seeding import derive_seed
from .transforms import apply_chain, validate_descriptor

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "fedskew-manifest/1"


class Regime(str, Enum):
    QUANTITY = "quantity"
    LABEL = "label"
    ACQUISITION = "acquisition"


@dataclass(frozen=True, eq=False)
class InstitutionShard:
    """One institution's training, validation and test data."""

    institution_id: int
    train: LabeledDataset
    val: Optional[LabeledDataset] = None
    test: Optional[LabeledDataset] = None
    transforms: Tuple[Dict, ...] = ()
    transform_seed: int = 0

    @property
    def size(self) -> int:
        """Q_i, the number of training samples."""
        return len(self.train)

    @property
    def label_histogram(self) -> np.ndarray:
        return self.train.histogram()


@dataclass(frozen=True)
class SkewReport:
    """Skew metrics of one partition."""

    quantity_std: float
    mean_pairwise_ks: float
    sizes: Tuple[int, ...]
    histograms: Tuple[Tuple[int, ...], ...]

    def to_dict(self) -> Dict:
        return {
            "quantity_std": self.quantity_std,
            "mean_pairwise_ks": self.mean_pairwise_ks,
            "sizes": list(self.sizes),
            "histograms": [list(h) for h in self.histograms],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SkewReport":
        return cls(
            quantity_std=float(data["quantity_std"]),
            mean_pairwise_ks=float(data["mean_pairwise_ks"]),
            sizes=tuple(int(s) for s in data["sizes"]),
            histograms=tuple(tuple(int(c) for c in h) for h in data["histograms"]),
        )


_PLAN_KEYS = {
    Regime.QUANTITY: {"sizes", "proportions", "total"},
    Regime.LABEL: {"institutions", "non_iid_fraction"},
    Regime.ACQUISITION: {"institutions", "transforms"},
}


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    """
    Declarative description of a partition.

    Quantity plans give explicit sizes, or proportions scaled to `total`
    (default: the whole training pool) by largest remainder. Label plans give
    the institution count and the non-IID fraction f. Acquisition plans give
    one transform chain per institution over an otherwise IID equal split.
    """

    regime: Regime
    sizes: Optional[Tuple[int, ...]] = None
    proportions: Optional[Tuple[float, ...]] = None
    total: Optional[int] = None
    institutions: Optional[int] = None
    non_iid_fraction: Optional[float] = None
    transforms: Optional[Tuple[Tuple[Dict, ...], ...]] = None
    seed: int = 0
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.regime == Regime.QUANTITY:
            if (self.sizes is None) == (self.proportions is None):
                raise ValueError("Quantity plan needs exactly one of 'sizes' or 'proportions'")
            if self.sizes is not None:
                sizes = tuple(int(s) for s in self.sizes)
                if any(s < 1 for s in sizes):
                    raise ValueError(f"Quantity sizes must be positive, got {list(sizes)}")
                object.__setattr__(self, "sizes", sizes)
                if self.total is not None:
                    raise ValueError("'total' only applies to proportion-based quantity plans")
            else:
                proportions = tuple(float(p) for p in self.proportions)
                if any(p <= 0 for p in proportions):
                    raise ValueError(f"Quantity proportions must be positive, got {list(proportions)}")
                object.__setattr__(self, "proportions", proportions)
                if self.total is not None and int(self.total) < len(proportions):
                    raise ValueError(f"'total' {self.total} is smaller than the institution count")
        elif self.regime == Regime.LABEL:
            if self.institutions is None or self.non_iid_fraction is None:
                raise ValueError("Label plan needs 'institutions' and 'non_iid_fraction'")
            if not 0.0 <= float(self.non_iid_fraction) <= 1.0:
                raise ValueError(f"non_iid_fraction must lie in [0, 1], got {self.non_iid_fraction}")
        else:
            if not self.transforms:
                raise ValueError("Acquisition plan needs a 'transforms' list")
            chains = tuple(tuple(chain) for chain in self.transforms)
            for chain in chains:
                for descriptor in chain:
                    validate_descriptor(descriptor)
            object.__setattr__(self, "transforms", chains)
            if self.institutions is not None and int(self.institutions) != len(chains):
                raise ValueError(
                    f"'institutions' is {self.institutions} but {len(chains)} transform chains were given"
                )

        minimum = 1 if self.regime == Regime.QUANTITY else 2
        if self.n < minimum:
            raise ValueError(f"A {self.regime.value} partition needs at least {minimum} institutions, got {self.n}")

    @property
    def n(self) -> int:
        if self.regime == Regime.QUANTITY:
            return len(self.sizes if self.sizes is not None else self.proportions)
        if self.regime == Regime.LABEL:
            return int(self.institutions)
        return len(self.transforms)

    def resolve_sizes(self, pool_size: int) -> Tuple[int, ...]:
        """Concrete training sizes of a quantity plan for a pool of the given size."""
        if self.regime != Regime.QUANTITY:
            raise ValueError(f"Only quantity plans have explicit sizes, not {self.regime.value}")
        if self.sizes is not None:
            return self.sizes
        total = pool_size if self.total is None else int(self.total)
        return tuple(int(s) for s in apportion(total, self.proportions))

    def to_dict(self) -> Dict:
        data = {"regime": self.regime.value}
        if self.id:
            data["id"] = self.id
        if self.sizes is not None:
            data["sizes"] = list(self.sizes)
        if self.proportions is not None:
            data["proportions"] = list(self.proportions)
        if self.total is not None:
            data["total"] = int(self.total)
        if self.regime == Regime.LABEL:
            data["institutions"] = int(self.institutions)
            data["non_iid_fraction"] = float(self.non_iid_fraction)
        if self.regime == Regime.ACQUISITION:
            data["transforms"] = [list(chain) for chain in self.transforms]
        if self.seed:
            data["seed"] = int(self.seed)
        return data

    @classmethod
    def from_dict(cls, data: Dict, path: str = "plan") -> "PartitionPlan":
        """
        Parse a plan object, rejecting unknown keys.

        A 'preset' key expands one of the named presets; explicit keys
        alongside it override the preset's values.
        """
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected an object")
        data = dict(data)
        if "preset" in data:
            from .presets import expand_preset

            expanded = expand_preset(data.pop("preset"))
            expanded.update(data)
            data = expanded

        if "regime" not in data:
            raise ValueError(f"{path}.regime: missing")
        try:
            regime = Regime(data["regime"])
        except ValueError:
            raise ValueError(f"{path}.regime: unknown regime '{data['regime']}'")

        allowed = {"id", "regime", "seed"} | _PLAN_KEYS[regime]
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ValueError(f"Unknown key '{path}.{unknown[0]}'")

        def _tuple(key, cast):
            value = data.get(key)
            if value is None:
                return None
            if not isinstance(value, list):
                raise ValueError(f"{path}.{key}: expected a list")
            return tuple(cast(v) for v in value)

        try:
            return cls(
                regime=regime,
                sizes=_tuple("sizes", int),
                proportions=_tuple("proportions", float),
                total=data.get("total"),
                institutions=data.get("institutions"),
                non_iid_fraction=data.get("non_iid_fraction"),
                transforms=_tuple("transforms", tuple) if "transforms" in data else None,
                seed=int(data.get("seed", 0)),
                id=str(data.get("id", "")),
            )
        except (TypeError, ValueError) as e:
            raise ValueError(f"{path}: {e}")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def quantity_std(sizes: Sequence[float]) -> float:
    """Sample standard deviation (n - 1 denominator) of institution sizes."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.ndim != 1 or sizes.size < 2:
        raise ValueError(f"quantity_std needs at least 2 institutions, got {sizes.size}")
    return float(np.std(sizes, ddof=1))


def mean_pairwise_ks(histograms: Sequence[Sequence[float]]) -> float:
    """
    Mean Kolmogorov-Smirnov statistic over all unordered institution pairs.

    Each histogram is turned into a CDF over the fixed category order; the
    statistic of a pair is the largest absolute CDF difference.
    """
    hists = np.asarray(histograms, dtype=np.float64)
    if hists.ndim != 2 or hists.shape[0] < 2:
        raise ValueError("mean_pairwise_ks needs at least 2 histograms over the same categories")
    if np.any(hists < 0):
        raise ValueError("Histogram counts must be non-negative")
    totals = hists.sum(axis=1)
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        raise ValueError(f"Histogram {int(empty[0])} is empty")

    cdfs = np.cumsum(hists, axis=1) / totals[:, None]
    values = [np.max(np.abs(cdfs[a] - cdfs[b])) for a, b in combinations(range(len(cdfs)), 2)]
    return float(np.mean(values))


def score_partition(shards: Sequence[InstitutionShard]) -> SkewReport:
    """Skew report of a partition from its shard sizes and training histograms."""
    if len(shards) < 2:
        raise ValueError(f"score_partition needs at least 2 shards, got {len(shards)}")
    sizes = [shard.size for shard in shards]
    histograms = [shard.label_histogram for shard in shards]
    return SkewReport(
        quantity_std=quantity_std(sizes),
        mean_pairwise_ks=mean_pairwise_ks(histograms),
        sizes=tuple(int(s) for s in sizes),
        histograms=tuple(tuple(int(c) for c in h) for h in histograms),
    )


# ---------------------------------------------------------------------------
# Partition construction
# ---------------------------------------------------------------------------

def _balanced_targets(sizes: Sequence[int], counts: np.ndarray, require_all: bool) -> np.ndarray:
    """
    Per-institution, per-category sample targets matching global proportions.

    Each target is floor or ceil of size_i * p_c. The extra units go to the
    categories whose accumulated rounding excess is smallest, which keeps
    every category's running total close to its share of the pool.
    """
    counts = np.asarray(counts, dtype=np.int64)
    total = counts.sum()
    if total == 0:
        raise ValueError("Cannot partition an empty pool")
    proportions = counts / total
    remaining = counts.copy()
    excess = np.zeros(counts.size)
    targets = np.zeros((len(sizes), counts.size), dtype=np.int64)

    for i, size in enumerate(sizes):
        exact = size * proportions
        base = np.floor(exact).astype(np.int64)
        if np.any(base > remaining):
            category = int(np.flatnonzero(base > remaining)[0])
            raise ValueError(f"Category {category} has too few samples left for institution {i}")
        short = int(size - base.sum())
        eligible = np.flatnonzero(base + 1 <= remaining)
        priority = (exact - base) - excess
        order = eligible[np.argsort(-priority[eligible], kind="stable")]
        if order.size < short:
            raise ValueError(f"Not enough samples left to fill institution {i} with {size} samples")
        target = base.copy()
        target[order[:short]] += 1

        if require_all and np.any(target == 0):
            category = int(np.flatnonzero(target == 0)[0])
            raise ValueError(
                f"Institution {i} with {size} samples would hold no sample of category {category}"
            )
        targets[i] = target
        remaining -= target
        excess += target - exact
    return targets


def _deal(ds: LabeledDataset, targets: np.ndarray, rng: np.random.Generator) -> List[np.ndarray]:
    """Hand out shuffled per-category members according to a target matrix."""
    picks: List[List[np.ndarray]] = [[] for _ in range(targets.shape[0])]
    for category in range(ds.num_categories):
        members = np.flatnonzero(ds.labels == category)
        members = members[rng.permutation(members.size)]
        start = 0
        for i in range(targets.shape[0]):
            take = int(targets[i, category])
            picks[i].append(members[start:start + take])
            start += take
    return [np.sort(np.concatenate(p)) for p in picks]


def _scaled_sizes(sizes: Sequence[int], pool: LabeledDataset, reference: int) -> List[int]:
    """Sizes for a validation/test pool, in proportion to the training sizes."""
    total = int(np.floor(len(pool) * sum(sizes) / reference + 1e-9))
    scaled = apportion(min(total, len(pool)), sizes)
    if np.any(scaled < 1):
        raise ValueError(f"Pool of {len(pool)} samples is too small to give every institution one sample")
    return [int(s) for s in scaled]


def _quantity_indices(
    ds: LabeledDataset,
    sizes: Sequence[int],
    rng: np.random.Generator,
    require_all: bool
) -> List[np.ndarray]:
    targets = _balanced_targets(sizes, ds.histogram(), require_all)
    return _deal(ds, targets, rng)


def _assemble(
    train_parts: List[LabeledDataset],
    val_parts: Optional[List[LabeledDataset]],
    test_parts: Optional[List[LabeledDataset]],
    transforms: Optional[Sequence[Sequence[Dict]]] = None,
    seed: int = 0
) -> List[InstitutionShard]:
    shards = []
    for i, train in enumerate(train_parts):
        chain = tuple(transforms[i]) if transforms is not None else ()
        transform_seed = derive_seed(seed, "transform", i) if chain else 0
        val = val_parts[i] if val_parts is not None else None
        test = test_parts[i] if test_parts is not None else None
        if chain:
            train = _apply(train, chain, transform_seed, 0)
            val = _apply(val, chain, transform_seed, 1)
            test = _apply(test, chain, transform_seed, 2)
        shards.append(InstitutionShard(i, train, val, test, chain, transform_seed))
    return shards


def _apply(ds: Optional[LabeledDataset], chain: Sequence[Dict], transform_seed: int, split: int):
    if ds is None or len(ds) == 0:
        return ds
    return ds.with_images(apply_chain(ds.images, chain, derive_seed(transform_seed, split)))


def partition_quantity(
    ds: LabeledDataset,
    sizes: Sequence[int],
    seed: int,
    val: Optional[LabeledDataset] = None,
    test: Optional[LabeledDataset] = None
) -> List[InstitutionShard]:
    """
    Split a training pool into institutions of the given sizes.

    Every shard's label histogram stays within one sample per category of
    the pool's proportions. Validation and test pools, when given, are
    split the same way with sizes scaled to the pool.

    Raises:
        ValueError: If the sizes exceed the pool or a size is too small to
            hold one sample of every category
    """
    sizes = [int(s) for s in sizes]
    if not sizes or any(s < 1 for s in sizes):
        raise ValueError(f"Sizes must be positive, got {sizes}")
    if sum(sizes) > len(ds):
        raise ValueError(f"Sizes sum to {sum(sizes)} but the dataset holds only {len(ds)} samples")
    too_small = [i for i, s in enumerate(sizes) if s < ds.num_categories]
    if too_small:
        raise ValueError(
            f"Institution {too_small[0]} with {sizes[too_small[0]]} samples cannot hold "
            f"one sample of each of {ds.num_categories} categories"
        )

    train_idx = _quantity_indices(ds, sizes, np.random.default_rng([seed, 0]), require_all=True)
    train_parts = [ds.subset(idx) for idx in train_idx]
    val_parts = test_parts = None
    if val is not None:
        val_sizes = _scaled_sizes(sizes, val, len(ds))
        val_idx = _quantity_indices(val, val_sizes, np.random.default_rng([seed, 1]), require_all=False)
        val_parts = [val.subset(idx) for idx in val_idx]
    if test is not None:
        test_sizes = _scaled_sizes(sizes, test, len(ds))
        test_idx = _quantity_indices(test, test_sizes, np.random.default_rng([seed, 2]), require_all=False)
        test_parts = [test.subset(idx) for idx in test_idx]

    logger.info(f"Quantity partition into sizes {sizes}")
    return _assemble(train_parts, val_parts, test_parts)


def _label_indices(ds: LabeledDataset, n: int, f: float, rng: np.random.Generator) -> List[np.ndarray]:
    sizes = apportion(len(ds), np.ones(n))
    num_categories = ds.num_categories
    dominant = [i % num_categories for i in range(n)]
    dominant_counts = [int(np.floor(f * size + 0.5)) for size in sizes]

    shuffled = []
    for category in range(num_categories):
        members = np.flatnonzero(ds.labels == category)
        shuffled.append(members[rng.permutation(members.size)])

    taken = np.zeros(num_categories, dtype=np.int64)
    picks: List[List[np.ndarray]] = [[] for _ in range(n)]
    for i in range(n):
        category = dominant[i]
        need = dominant_counts[i]
        available = shuffled[category].size - taken[category]
        if need > available:
            raise ValueError(
                f"Category {category} has {available} samples left but institution {i} "
                f"needs {need} for its dominant block"
            )
        picks[i].append(shuffled[category][taken[category]:taken[category] + need])
        taken[category] += need

    residue_counts = np.array([shuffled[c].size - taken[c] for c in range(num_categories)])
    residue_sizes = [int(sizes[i] - dominant_counts[i]) for i in range(n)]
    if sum(residue_sizes) > 0:
        targets = _balanced_targets(residue_sizes, residue_counts, require_all=False)
        for category in range(num_categories):
            start = taken[category]
            for i in range(n):
                take = int(targets[i, category])
                picks[i].append(shuffled[category][start:start + take])
                start += take
    return [np.sort(np.concatenate(p)) for p in picks]


def partition_label_skew(
    ds: LabeledDataset,
    n: int,
    f: float,
    seed: int,
    val: Optional[LabeledDataset] = None,
    test: Optional[LabeledDataset] = None
) -> List[InstitutionShard]:
    """
    Split a pool into n equal institutions with a controlled non-IID fraction.

    Institution i draws round(f * Q_i) samples from its dominant category
    (i mod C) and fills the rest with a stratified draw from what remains.
    f=0 gives near-identical label histograms, f=1 disjoint ones when n == C.

    Raises:
        ValueError: If a dominant category block runs out, naming the
            category and institution
    """
    if n < 2:
        raise ValueError(f"Label skew needs at least 2 institutions, got {n}")
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"Non-IID fraction must lie in [0, 1], got {f}")
    if len(ds) < n:
        raise ValueError(f"Cannot split {len(ds)} samples into {n} institutions")

    train_parts = [ds.subset(idx) for idx in _label_indices(ds, n, f, np.random.default_rng([seed, 0]))]
    val_parts = test_parts = None
    if val is not None:
        val_parts = [val.subset(idx) for idx in _label_indices(val, n, f, np.random.default_rng([seed, 1]))]
    if test is not None:
        test_parts = [test.subset(idx) for idx in _label_indices(test, n, f, np.random.default_rng([seed, 2]))]

    logger.info(f"Label-skew partition into {n} institutions with non-IID fraction {f}")
    return _assemble(train_parts, val_parts, test_parts)


def partition_acquisition(
    ds: LabeledDataset,
    transforms: Sequence[Sequence[Dict]],
    seed: int,
    val: Optional[LabeledDataset] = None,
    test: Optional[LabeledDataset] = None
) -> List[InstitutionShard]:
    """
    Equal IID split where each institution's images pass through its own
    transform chain (resolution loss, noise, blur).
    """
    n = len(transforms)
    if n < 2:
        raise ValueError(f"Acquisition skew needs at least 2 institutions, got {n}")
    for chain in transforms:
        for descriptor in chain:
            validate_descriptor(descriptor)

    sizes = [int(s) for s in apportion(len(ds), np.ones(n))]
    base = partition_quantity(ds, sizes, seed, val, test)
    return _assemble(
        [s.train for s in base],
        [s.val for s in base] if val is not None else None,
        [s.test for s in base] if test is not None else None,
        transforms=transforms,
        seed=seed,
    )


def build_partition(
    plan: PartitionPlan,
    train: LabeledDataset,
    val: Optional[LabeledDataset] = None,
    test: Optional[LabeledDataset] = None,
    seed: Optional[int] = None
) -> List[InstitutionShard]:
    """Materialise a plan; seed defaults to the plan's own seed."""
    seed = plan.seed if seed is None else seed
    try:
        if plan.regime == Regime.QUANTITY:
            return partition_quantity(train, plan.resolve_sizes(len(train)), seed, val, test)
        if plan.regime == Regime.LABEL:
            return partition_label_skew(train, plan.n, float(plan.non_iid_fraction), seed, val, test)
        return partition_acquisition(train, plan.transforms, seed, val, test)
    except ValueError as e:
        logger.error(f"Failed to build {plan.regime.value} partition '{plan.id}': {e}")
        raise


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def manifest_dict(plan: Optional[PartitionPlan], shards: Sequence[InstitutionShard]) -> Dict:
    def _ids(ds):
        return [] if ds is None else [int(i) for i in ds.ids]

    return {
        "schema": MANIFEST_SCHEMA,
        "plan": None if plan is None else plan.to_dict(),
        "institutions": [
            {
                "institution_id": shard.institution_id,
                "train_ids": _ids(shard.train),
                "val_ids": _ids(shard.val),
                "test_ids": _ids(shard.test),
                "transforms": list(shard.transforms),
                "transform_seed": shard.transform_seed,
            }
            for shard in shards
        ],
    }


def save_manifest(
    path: Union[str, Path],
    plan: Optional[PartitionPlan],
    shards: Sequence[InstitutionShard]
) -> None:
    """Write a partition manifest as JSON."""
    Path(path).write_text(json.dumps(manifest_dict(plan, shards), indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote manifest for {len(shards)} institutions to {path}")


def shards_from_manifest(
    data: Dict,
    train: LabeledDataset,
    val: Optional[LabeledDataset] = None,
    test: Optional[LabeledDataset] = None
) -> List[InstitutionShard]:
    """Rebuild shards from a manifest dictionary and the pools it was built from."""
    if data.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"Unsupported manifest schema {data.get('schema')!r}")
    entries = data.get("institutions")
    if not isinstance(entries, list) or not entries:
        raise ValueError("Manifest lists no institutions")

    shards = []
    for entry in entries:
        chain = tuple(entry.get("transforms", ()))
        for descriptor in chain:
            validate_descriptor(descriptor)
        transform_seed = int(entry.get("transform_seed", 0))

        def _pick(pool, key):
            ids = entry.get(key, [])
            if not ids:
                return None
            if pool is None:
                raise ValueError(f"Manifest lists {key} but no matching dataset was given")
            return pool.select_ids(ids)

        train_part = _pick(train, "train_ids")
        if train_part is None:
            raise ValueError(f"Institution {entry.get('institution_id')} has no training samples")
        val_part = _pick(val, "val_ids")
        test_part = _pick(test, "test_ids")
        if chain:
            train_part = _apply(train_part, chain, transform_seed, 0)
            val_part = _apply(val_part, chain, transform_seed, 1)
            test_part = _apply(test_part, chain, transform_seed, 2)
        shards.append(InstitutionShard(
            int(entry["institution_id"]), train_part, val_part, test_part, chain, transform_seed
        ))

    seen = set()
    for shard in shards:
        ids = set(int(i) for i in shard.train.ids)
        if seen & ids:
            raise ValueError("Manifest assigns a training sample to more than one institution")
        seen |= ids
    return shards


def load_manifest(
    path: Union[str, Path],
    train: LabeledDataset,
    val: Optional[LabeledDataset] = None,
    test: Optional[LabeledDataset] = None
) -> Tuple[Optional[PartitionPlan], List[InstitutionShard]]:
    """Read a manifest file and rebuild its plan and shards."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: manifest syntax error at line {e.lineno} column {e.colno}: {e.msg}")
    plan = PartitionPlan.from_dict(data["plan"]) if data.get("plan") else None
    return plan, shards_from_manifest(data, train, val, test)
