"""
Acquisition transforms: resolution loss, additive / multiplicative /
photon noise, motion blur, and seeded mixtures of these.

Every transform takes an N x C x H x W batch in [0, 1] and returns a new
batch of the same shape clamped back into [0, 1]. Noise for image k is
drawn from default_rng([seed, k]), so results do not depend on how the
batch is chunked or ordered for execution.
"""

from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

DEFAULT_SIGMA = 0.1
DEFAULT_POISSON_SCALE = 64.0
DEFAULT_BLUR_LENGTH = 5
DEFAULT_BLUR_ANGLE = 0.0

TRANSFORM_KINDS = ("gaussian", "speckle", "poisson", "motion_blur", "resolution", "mixture")


def _as_batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"Transforms expect an N x C x H x W batch, got shape {images.shape}")
    return images


def _per_image_noise(shape: Tuple[int, ...], seed: int, draw) -> np.ndarray:
    noise = np.empty(shape)
    for k in range(shape[0]):
        rng = np.random.default_rng([seed, k])
        noise[k] = draw(rng, shape[1:])
    return noise


def degrade_resolution(images: np.ndarray, factor: int) -> np.ndarray:
    """
    Block-average downsample by factor, then nearest-neighbour upsample back.

    Edge blocks that do not fill a whole k x k window average what they
    cover. factor=1 returns an exact copy.
    """
    images = _as_batch(images)
    if int(factor) != factor or factor < 1:
        raise ValueError(f"Resolution factor must be a positive integer, got {factor}")
    factor = int(factor)
    h, w = images.shape[2:]
    if factor > min(h, w):
        raise ValueError(f"Resolution factor {factor} exceeds image extent {h}x{w}")
    if factor == 1:
        return images.copy()

    rows = np.arange(0, h, factor)
    cols = np.arange(0, w, factor)
    row_sizes = np.diff(np.append(rows, h))
    col_sizes = np.diff(np.append(cols, w))

    sums = np.add.reduceat(np.add.reduceat(images, rows, axis=2), cols, axis=3)
    means = sums / (row_sizes[:, None] * col_sizes[None, :])
    up = np.repeat(np.repeat(means, row_sizes, axis=2), col_sizes, axis=3)
    return np.clip(up, 0.0, 1.0)


def add_gaussian(images: np.ndarray, sigma: float = DEFAULT_SIGMA, seed: int = 0) -> np.ndarray:
    """x + N(0, sigma^2), clamped."""
    images = _as_batch(images)
    if sigma < 0:
        raise ValueError(f"Gaussian sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return images.copy()
    noise = _per_image_noise(images.shape, seed, lambda rng, s: rng.normal(0.0, sigma, size=s))
    return np.clip(images + noise, 0.0, 1.0)


def add_speckle(images: np.ndarray, sigma: float = DEFAULT_SIGMA, seed: int = 0) -> np.ndarray:
    """x * (1 + N(0, sigma^2)), clamped."""
    images = _as_batch(images)
    if sigma < 0:
        raise ValueError(f"Speckle sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return images.copy()
    noise = _per_image_noise(images.shape, seed, lambda rng, s: rng.normal(0.0, sigma, size=s))
    return np.clip(images * (1.0 + noise), 0.0, 1.0)


def add_poisson(images: np.ndarray, scale: float = DEFAULT_POISSON_SCALE, seed: int = 0) -> np.ndarray:
    """Poisson(x * scale) / scale, clamped. Larger scale means less noise."""
    images = _as_batch(images)
    if not scale > 0:
        raise ValueError(f"Poisson scale must be positive, got {scale}")
    out = np.empty_like(images)
    for k in range(images.shape[0]):
        rng = np.random.default_rng([seed, k])
        out[k] = rng.poisson(images[k] * scale) / scale
    return np.clip(out, 0.0, 1.0)


def line_kernel(length: int, angle: float) -> np.ndarray:
    """Normalised line kernel of the given length at angle degrees (0 = horizontal)."""
    if int(length) != length or length < 1:
        raise ValueError(f"Blur length must be a positive integer, got {length}")
    length = int(length)
    if length == 1:
        return np.ones((1, 1))

    size = length if length % 2 == 1 else length + 1
    center = size // 2
    kernel = np.zeros((size, size))
    theta = np.deg2rad(angle)
    # Integer steps along the line; even lengths extend one step past the centre
    offsets = np.arange(length) - (length - 1) // 2
    for t in offsets:
        r = int(np.floor(center - t * np.sin(theta) + 0.5))
        c = int(np.floor(center + t * np.cos(theta) + 0.5))
        kernel[r, c] = 1.0
    return kernel / kernel.sum()


def motion_blur(images: np.ndarray, length: int = DEFAULT_BLUR_LENGTH, angle: float = DEFAULT_BLUR_ANGLE) -> np.ndarray:
    """Convolve every channel with a line kernel; borders replicate the edge pixel."""
    images = _as_batch(images)
    kernel = line_kernel(length, angle)
    if kernel.shape == (1, 1):
        return images.copy()
    blurred = ndimage.convolve(images, kernel[None, None, :, :], mode="nearest")
    return np.clip(blurred, 0.0, 1.0)


def mixture(images: np.ndarray, components: Sequence[Tuple[float, Dict]], seed: int = 0) -> np.ndarray:
    """
    Apply one of several transforms to each image, chosen by weight.

    Args:
        images: Batch to transform
        components: (weight, transform descriptor) pairs; weights non-negative, summing to 1
        seed: Seed for the per-image choice and for the chosen transform's noise

    Returns:
        Transformed batch; image k uses the component drawn from default_rng([seed, k])
    """
    images = _as_batch(images)
    if not components:
        raise ValueError("Mixture needs at least one component")
    weights = np.array([float(w) for w, _ in components])
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"Mixture weights must be non-negative and sum to 1, got {weights.tolist()}")
    for _, descriptor in components:
        validate_descriptor(descriptor)
        if descriptor["kind"] == "mixture":
            raise ValueError("Mixtures cannot be nested")

    choice = np.array([
        np.random.default_rng([seed, k]).choice(len(components), p=weights)
        for k in range(images.shape[0])
    ], dtype=np.int64)

    out = np.empty_like(images)
    for j, (_, descriptor) in enumerate(components):
        members = np.flatnonzero(choice == j)
        if members.size == 0:
            continue
        component_seed = int(np.random.default_rng([seed, len(images), j]).integers(2**62))
        transformed = apply_transform(images, descriptor, component_seed)
        out[members] = transformed[members]
    return out


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------

_ALLOWED_KEYS = {
    "gaussian": {"kind", "sigma"},
    "speckle": {"kind", "sigma"},
    "poisson": {"kind", "scale"},
    "motion_blur": {"kind", "length", "angle"},
    "resolution": {"kind", "factor"},
    "mixture": {"kind", "components"},
}


def validate_descriptor(descriptor: Dict) -> None:
    """Check a transform descriptor such as {'kind': 'gaussian', 'sigma': 0.1}."""
    if not isinstance(descriptor, dict) or "kind" not in descriptor:
        raise ValueError(f"Transform descriptor must be an object with a 'kind', got {descriptor!r}")
    kind = descriptor["kind"]
    if kind not in _ALLOWED_KEYS:
        raise ValueError(f"Unknown transform kind '{kind}'; expected one of {', '.join(TRANSFORM_KINDS)}")
    unknown = sorted(set(descriptor) - _ALLOWED_KEYS[kind])
    if unknown:
        raise ValueError(f"Unknown key '{unknown[0]}' in {kind} transform")
    if kind == "mixture":
        components = descriptor.get("components")
        if not isinstance(components, list) or not components:
            raise ValueError("Mixture transform needs a non-empty 'components' list")
        for entry in components:
            if not isinstance(entry, dict) or set(entry) != {"weight", "transform"}:
                raise ValueError("Mixture components must be objects with 'weight' and 'transform'")


def _components(descriptor: Dict) -> List[Tuple[float, Dict]]:
    return [(float(entry["weight"]), entry["transform"]) for entry in descriptor["components"]]


def apply_transform(images: np.ndarray, descriptor: Dict, seed: int) -> np.ndarray:
    """Apply a single transform descriptor."""
    validate_descriptor(descriptor)
    kind = descriptor["kind"]
    if kind == "gaussian":
        return add_gaussian(images, float(descriptor.get("sigma", DEFAULT_SIGMA)), seed)
    if kind == "speckle":
        return add_speckle(images, float(descriptor.get("sigma", DEFAULT_SIGMA)), seed)
    if kind == "poisson":
        return add_poisson(images, float(descriptor.get("scale", DEFAULT_POISSON_SCALE)), seed)
    if kind == "motion_blur":
        return motion_blur(
            images,
            descriptor.get("length", DEFAULT_BLUR_LENGTH),
            float(descriptor.get("angle", DEFAULT_BLUR_ANGLE)),
        )
    if kind == "resolution":
        return degrade_resolution(images, descriptor["factor"])
    return mixture(images, _components(descriptor), seed)


def apply_chain(images: np.ndarray, descriptors: Sequence[Dict], seed: int) -> np.ndarray:
    """Apply descriptors in order; step s draws its noise from a seed derived from (seed, s)."""
    out = _as_batch(images).copy()
    for step, descriptor in enumerate(descriptors):
        step_seed = int(np.random.default_rng([seed, step]).integers(2**62))
        out = apply_transform(out, descriptor, step_seed)
    return out


def dominated_mixture(dominant: str, weight: float = 0.7) -> Dict:
    """
    Mixture descriptor where one transform carries most of the weight.

    The remaining weight is split evenly across the other noise/blur kinds.
    """
    kinds = ["gaussian", "speckle", "poisson", "motion_blur"]
    if dominant not in kinds:
        raise ValueError(f"Dominant transform must be one of {kinds}, got '{dominant}'")
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"Dominant weight must lie in [0, 1], got {weight}")
    others = [k for k in kinds if k != dominant]
    rest = (1.0 - weight) / len(others)
    components = [{"weight": weight, "transform": {"kind": dominant}}]
    components += [{"weight": rest, "transform": {"kind": k}} for k in others]
    return {"kind": "mixture", "components": components}
