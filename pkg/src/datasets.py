"""
Labeled image datasets: IDX reader/writer, a seeded synthetic generator,
and stratified train/validation/test splitting.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    Images with integer category labels and stable sample identifiers.

    images is N x C x H x W (float64 in [0, 1]); labels and ids have length
    N; groups, when given, keeps samples of one subject together on splits.
    """

    images: np.ndarray
    labels: np.ndarray
    num_categories: int
    ids: np.ndarray
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        ids = np.array(self.ids, dtype=np.int64, copy=True)

        if images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {images.shape}")
        n = images.shape[0]
        if labels.shape != (n,) or ids.shape != (n,):
            raise ValueError(
                f"images, labels and ids disagree in length: {n}, {labels.shape}, {ids.shape}"
            )
        if self.num_categories < 1:
            raise ValueError(f"num_categories must be positive, got {self.num_categories}")
        if n and (labels.min() < 0 or labels.max() >= self.num_categories):
            raise ValueError(f"labels must lie in [0, {self.num_categories})")
        if np.unique(ids).size != n:
            raise ValueError("sample ids must be unique")
        if n and (not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must be finite and within [0, 1]")

        for arr in (images, labels, ids):
            arr.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "num_categories", int(self.num_categories))

        if self.groups is not None:
            groups = np.array(self.groups, dtype=np.int64, copy=True)
            if groups.shape != (n,):
                raise ValueError(f"groups must have one entry per sample, got {groups.shape}")
            groups.flags.writeable = False
            object.__setattr__(self, "groups", groups)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def histogram(self) -> np.ndarray:
        """Per-category sample counts."""
        return np.bincount(self.labels, minlength=self.num_categories)

    def subset(self, indices: Iterable[int]) -> "LabeledDataset":
        """Dataset restricted to the given row indices (in the given order)."""
        idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            num_categories=self.num_categories,
            ids=self.ids[idx],
            groups=None if self.groups is None else self.groups[idx],
        )

    def select_ids(self, ids: Sequence[int]) -> "LabeledDataset":
        """Dataset restricted to samples with the given ids (in the given order)."""
        position = {int(sample_id): i for i, sample_id in enumerate(self.ids)}
        try:
            idx = [position[int(sample_id)] for sample_id in ids]
        except KeyError as e:
            raise ValueError(f"Unknown sample id {e.args[0]}")
        return self.subset(np.asarray(idx, dtype=np.int64))

    def with_images(self, images: np.ndarray) -> "LabeledDataset":
        """Same samples and labels with replaced pixel data."""
        if np.shape(images) != self.images.shape:
            raise ValueError(f"Replacement images have shape {np.shape(images)}, expected {self.images.shape}")
        return LabeledDataset(images, self.labels, self.num_categories, self.ids, self.groups)


def concat_datasets(datasets: Sequence[LabeledDataset]) -> LabeledDataset:
    """Pool several datasets with disjoint ids into one."""
    datasets = [ds for ds in datasets if ds is not None]
    if not datasets:
        raise ValueError("No datasets to concatenate")
    num_categories = datasets[0].num_categories
    shape = datasets[0].image_shape
    for ds in datasets:
        if ds.num_categories != num_categories or ds.image_shape != shape:
            raise ValueError("Datasets to concatenate must share category count and image shape")

    has_groups = all(ds.groups is not None for ds in datasets)
    return LabeledDataset(
        images=np.concatenate([ds.images for ds in datasets], axis=0),
        labels=np.concatenate([ds.labels for ds in datasets]),
        num_categories=num_categories,
        ids=np.concatenate([ds.ids for ds in datasets]),
        groups=np.concatenate([ds.groups for ds in datasets]) if has_groups else None,
    )


def apportion(total: int, weights: Sequence[float]) -> np.ndarray:
    """
    Split an integer total proportionally to weights (largest remainder).

    Every share differs from its exact proportional value by less than one;
    ties in the remainder go to the lower index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or weights.size == 0 or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError(f"apportion needs non-negative weights with a positive sum, got {weights.tolist()}")
    exact = total * weights / weights.sum()
    shares = np.floor(exact).astype(np.int64)
    short = int(total - shares.sum())
    order = np.argsort(-(exact - shares), kind="stable")
    shares[order[:short]] += 1
    return shares


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

def _read_header(data: bytes, fmt: str, path: Union[str, Path]) -> Tuple[int, ...]:
    size = struct.calcsize(fmt)
    if len(data) < size:
        raise ValueError(f"{path}: unexpected end of data in IDX header")
    return struct.unpack_from(fmt, data, 0)


def load_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    num_categories: Optional[int] = None
) -> LabeledDataset:
    """
    Load an IDX image/label file pair.

    Args:
        images_path: File starting with magic 2051, count, rows, cols, then u8 pixels
        labels_path: File starting with magic 2049, count, then u8 labels
        num_categories: Category count; defaults to max(label) + 1 (at least 2)

    Returns:
        LabeledDataset with N x 1 x rows x cols images scaled by 1/255

    Raises:
        FileNotFoundError: If a file is missing
        ValueError: On bad magic numbers, disagreeing counts or truncated data
    """
    images_path = Path(images_path)
    labels_path = Path(labels_path)
    for path in (images_path, labels_path):
        if not path.exists():
            raise FileNotFoundError(f"IDX file not found: {path}")

    image_bytes = images_path.read_bytes()
    label_bytes = labels_path.read_bytes()

    magic, count, rows, cols = _read_header(image_bytes, ">IIII", images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(f"{images_path}: not an IDX file (image magic {magic}, expected {IDX_IMAGE_MAGIC})")
    label_magic, label_count = _read_header(label_bytes, ">II", labels_path)
    if label_magic != IDX_LABEL_MAGIC:
        raise ValueError(f"{labels_path}: not an IDX file (label magic {label_magic}, expected {IDX_LABEL_MAGIC})")
    if count != label_count:
        raise ValueError(f"image/label count disagree: {count} images vs {label_count} labels")

    pixel_count = count * rows * cols
    pixels = image_bytes[16:]
    labels = label_bytes[8:]
    if len(pixels) < pixel_count:
        raise ValueError(f"{images_path}: unexpected end of data ({len(pixels)} of {pixel_count} pixel bytes)")
    if len(labels) < count:
        raise ValueError(f"{labels_path}: unexpected end of data ({len(labels)} of {count} label bytes)")
    if len(pixels) > pixel_count or len(labels) > count:
        raise ValueError(f"{images_path} / {labels_path}: trailing bytes after IDX payload")

    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, 1, rows, cols) / 255.0
    label_array = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    if num_categories is None:
        num_categories = max(2, int(label_array.max()) + 1 if count else 2)

    logger.info(f"Loaded {count} images of {rows}x{cols} from {images_path.name}")
    return LabeledDataset(images, label_array, num_categories, np.arange(count))


def write_idx(ds: LabeledDataset, images_path: Union[str, Path], labels_path: Union[str, Path]) -> None:
    """Write a single-channel dataset as an IDX image/label pair."""
    n, channels, rows, cols = ds.images.shape
    if channels != 1:
        raise ValueError(f"IDX stores single-channel images, dataset has {channels} channels")
    if ds.num_categories > 256:
        raise ValueError("IDX labels are single bytes; at most 256 categories")

    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABEL_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()
    )


# ---------------------------------------------------------------------------
# Synthetic oriented-bar task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """
    Recipe for a synthetic classification task.

    Category j draws a bar at angle pi * j / C with per-sample jitter in
    angle, position, width and brightness, over a noisy background.
    """

    num_categories: int
    counts: Tuple[int, ...]
    image_size: Tuple[int, int] = (16, 16)
    seed: int = 0
    noise: float = 0.05

    def __post_init__(self):
        if self.num_categories < 2:
            raise ValueError(f"Synthetic task needs at least 2 categories, got {self.num_categories}")
        if len(self.counts) != self.num_categories:
            raise ValueError(
                f"counts lists {len(self.counts)} categories but num_categories is {self.num_categories}"
            )
        if any(int(c) < 1 for c in self.counts):
            raise ValueError(f"Every category needs at least one sample, got counts {list(self.counts)}")
        if len(self.image_size) != 2 or min(self.image_size) < 4:
            raise ValueError(f"image_size must be (H, W) with both extents >= 4, got {self.image_size}")
        if self.noise < 0:
            raise ValueError(f"noise must be non-negative, got {self.noise}")

    def to_dict(self) -> Dict:
        return {
            "num_categories": self.num_categories,
            "counts": list(self.counts),
            "image_size": list(self.image_size),
            "seed": self.seed,
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SynthSpec":
        allowed = {"num_categories", "counts", "image_size", "seed", "noise", "per_category"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ValueError(f"Unknown synth spec key '{unknown[0]}'")
        if "num_categories" not in data:
            raise ValueError("Synth spec is missing 'num_categories'")
        c = int(data["num_categories"])
        if "counts" in data:
            counts = tuple(int(x) for x in data["counts"])
        elif "per_category" in data:
            counts = tuple([int(data["per_category"])] * max(c, 0))
        else:
            raise ValueError("Synth spec needs 'counts' or 'per_category'")
        size = data.get("image_size", (16, 16))
        if isinstance(size, int):
            size = (size, size)
        return cls(
            num_categories=c,
            counts=counts,
            image_size=tuple(int(x) for x in size),
            seed=int(data.get("seed", 0)),
            noise=float(data.get("noise", 0.05)),
        )


def _render_bars(
    rng: np.random.Generator,
    category: int,
    count: int,
    num_categories: int,
    height: int,
    width: int,
    noise: float
) -> np.ndarray:
    spacing = np.pi / num_categories
    angle = category * spacing + rng.uniform(-0.2, 0.2, size=count) * spacing
    cy = (height - 1) / 2.0 + rng.uniform(-height / 8.0, height / 8.0, size=count)
    cx = (width - 1) / 2.0 + rng.uniform(-width / 8.0, width / 8.0, size=count)
    half_length = rng.uniform(0.28, 0.4, size=count) * min(height, width)
    thickness = rng.uniform(0.7, 1.2, size=count)
    brightness = rng.uniform(0.65, 0.95, size=count)
    background = rng.uniform(0.0, 0.15, size=count)

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy = yy[None] - cy[:, None, None]
    dx = xx[None] - cx[:, None, None]
    cos_a = np.cos(angle)[:, None, None]
    sin_a = np.sin(angle)[:, None, None]
    along = dx * cos_a - dy * sin_a
    across = dx * sin_a + dy * cos_a

    profile = np.exp(-0.5 * (across / thickness[:, None, None]) ** 2)
    extent = np.clip(half_length[:, None, None] - np.abs(along) + 0.5, 0.0, 1.0)
    images = background[:, None, None] + brightness[:, None, None] * profile * extent
    images = images + rng.normal(0.0, noise, size=images.shape)
    return np.clip(images, 0.0, 1.0)[:, None, :, :]


def synth_generate(spec: Union[SynthSpec, Dict]) -> LabeledDataset:
    """
    Generate the synthetic oriented-bar dataset described by spec.

    Deterministic: the same SynthSpec always gives bitwise-identical
    images, labels and ids. Samples are shuffled across categories and ids
    are 0..N-1 in the shuffled order.
    """
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    rng = np.random.default_rng(spec.seed)
    height, width = spec.image_size

    images = []
    labels = []
    for category, count in enumerate(spec.counts):
        images.append(_render_bars(rng, category, int(count), spec.num_categories, height, width, spec.noise))
        labels.append(np.full(int(count), category, dtype=np.int64))

    images = np.concatenate(images, axis=0)
    labels = np.concatenate(labels)
    order = rng.permutation(labels.size)
    return LabeledDataset(images[order], labels[order], spec.num_categories, np.arange(labels.size))


# ---------------------------------------------------------------------------
# Stratified splitting
# ---------------------------------------------------------------------------

def _normalise_fractions(fractions) -> np.ndarray:
    if isinstance(fractions, dict):
        unknown = sorted(set(fractions) - set(SPLIT_NAMES))
        if unknown:
            raise ValueError(f"Unknown split name '{unknown[0]}'")
        fractions = [fractions.get(name, 0.0) for name in SPLIT_NAMES]
    values = np.asarray(fractions, dtype=np.float64)
    if values.shape != (3,):
        raise ValueError(f"Need three fractions (train, val, test), got {list(values)}")
    if np.any(values <= 0):
        raise ValueError(f"Split fractions must be positive, got {values.tolist()}")
    if abs(values.sum() - 1.0) > 1e-9:
        raise ValueError(f"Split fractions must sum to 1, got {values.sum()}")
    return values


def stratified_split(
    ds: LabeledDataset,
    fractions,
    seed: int
) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """
    Split a dataset into train/validation/test with per-category stratification.

    Args:
        ds: Dataset to split
        fractions: {'train', 'val', 'test'} fractions (or a 3-sequence) summing to 1
        seed: Shuffling seed

    Returns:
        (train, val, test); per-category counts differ from exact proportions
        by at most one (counted in groups when the dataset carries group keys)

    Raises:
        ValueError: If a split would receive no sample of some category
    """
    fractions = _normalise_fractions(fractions)
    rng = np.random.default_rng(seed)
    parts: List[List[int]] = [[], [], []]

    if ds.groups is None:
        units = [[i] for i in range(len(ds))]
    else:
        by_group: Dict[int, List[int]] = {}
        for i, group in enumerate(ds.groups):
            by_group.setdefault(int(group), []).append(i)
        units = [by_group[g] for g in sorted(by_group)]

    unit_labels = np.array([ds.labels[unit[0]] for unit in units], dtype=np.int64)
    for category in range(ds.num_categories):
        members = np.flatnonzero(unit_labels == category)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        shares = apportion(members.size, fractions)
        for split, share in enumerate(shares):
            if share == 0:
                raise ValueError(
                    f"Split '{SPLIT_NAMES[split]}' would receive no samples of category {category}"
                )
        bounds = np.concatenate([[0], np.cumsum(shares)])
        for split in range(3):
            for unit in members[bounds[split]:bounds[split + 1]]:
                parts[split].extend(units[unit])

    return tuple(ds.subset(np.sort(np.asarray(p, dtype=np.int64))) for p in parts)
