"""
Network substrate: architecture descriptors, model state, and the
forward / backward / update operations every protocol trains with.

All operations are pure: they take a ModelState and return new values.
Running batch-norm statistics are handed back alongside gradients instead
of being written into the model.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .layers import BN_MOMENTUM, LAYER_TYPES, BatchNorm, Conv2D, Layer
from .losses import CategoryWeights, weighted_ce, weighted_ce_grad

TRAIN = "train"
INFER = "infer"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an architecture with explicit input and output extents."""

    kind: str
    name: str
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    kernel: int = 0

    def to_dict(self) -> Dict:
        data = {
            "kind": self.kind,
            "name": self.name,
            "in_shape": list(self.in_shape),
            "out_shape": list(self.out_shape),
        }
        if self.kernel:
            data["kernel"] = self.kernel
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "LayerSpec":
        return cls(
            kind=data["kind"],
            name=data["name"],
            in_shape=tuple(data["in_shape"]),
            out_shape=tuple(data["out_shape"]),
            kernel=int(data.get("kernel", 0)),
        )


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor: input extent, category count and layer sequence."""

    input_shape: Tuple[int, int, int]
    num_categories: int
    layers: Tuple[LayerSpec, ...]
    name: str = "custom"

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_categories": self.num_categories,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Arch":
        return cls(
            input_shape=tuple(data["input_shape"]),
            num_categories=int(data["num_categories"]),
            layers=tuple(LayerSpec.from_dict(layer) for layer in data["layers"]),
            name=data.get("name", "custom"),
        )


class _ArchBuilder:
    """Chains layer specs while tracking the running output extent."""

    def __init__(self, input_shape: Tuple[int, ...]):
        self.shape = tuple(int(e) for e in input_shape)
        self.layers: List[LayerSpec] = []
        self.counts: Dict[str, int] = {}
        self.input_shape = self.shape

    def _add(self, kind: str, out_shape: Tuple[int, ...], kernel: int = 0) -> "_ArchBuilder":
        self.counts[kind] = self.counts.get(kind, 0) + 1
        name = f"{kind}{self.counts[kind]}"
        self.layers.append(LayerSpec(kind, name, self.shape, tuple(out_shape), kernel))
        self.shape = tuple(out_shape)
        return self

    def conv(self, channels: int, kernel: int = 3):
        return self._add("conv", (channels,) + self.shape[1:], kernel)

    def bn(self):
        return self._add("bn", self.shape)

    def relu(self):
        return self._add("relu", self.shape)

    def maxpool(self):
        c, h, w = self.shape
        return self._add("maxpool", (c, h // 2, w // 2))

    def flatten(self):
        return self._add("flatten", (int(np.prod(self.shape)),))

    def dense(self, features: int):
        return self._add("dense", (features,))


def tiny_conv_arch(input_shape: Sequence[int] = (1, 16, 16), num_categories: int = 4) -> Arch:
    """conv3x3(8)-BN-ReLU-maxpool2-conv3x3(16)-BN-ReLU-maxpool2-dense(C)."""
    b = _ArchBuilder(input_shape)
    b.conv(8).bn().relu().maxpool()
    b.conv(16).bn().relu().maxpool()
    b.flatten().dense(num_categories)
    return Arch(b.input_shape, int(num_categories), tuple(b.layers), "tiny-conv")


def mlp_bn_arch(
    input_shape: Sequence[int] = (1, 16, 16),
    num_categories: int = 4,
    hidden: int = 32
) -> Arch:
    """flatten-dense(h)-BN-ReLU-dense(C)."""
    b = _ArchBuilder(input_shape)
    b.flatten().dense(hidden).bn().relu().dense(num_categories)
    return Arch(b.input_shape, int(num_categories), tuple(b.layers), "mlp-bn")


def mlp_arch(
    input_shape: Sequence[int] = (1, 16, 16),
    num_categories: int = 4,
    hidden: int = 32
) -> Arch:
    """flatten-dense(h)-ReLU-dense(C), without batch normalisation."""
    b = _ArchBuilder(input_shape)
    b.flatten().dense(hidden).relu().dense(num_categories)
    return Arch(b.input_shape, int(num_categories), tuple(b.layers), "mlp")


ARCHITECTURES = {
    "tiny-conv": tiny_conv_arch,
    "mlp-bn": mlp_bn_arch,
    "mlp": mlp_arch,
}


def arch_from_name(
    name: str,
    input_shape: Sequence[int],
    num_categories: int,
    hidden: Optional[int] = None
) -> Arch:
    """Build one of the named architectures."""
    if name not in ARCHITECTURES:
        raise ValueError(f"Unknown architecture '{name}'; choose from {sorted(ARCHITECTURES)}")
    if name == "tiny-conv":
        return tiny_conv_arch(input_shape, num_categories)
    kwargs = {} if hidden is None else {"hidden": hidden}
    return ARCHITECTURES[name](input_shape, num_categories, **kwargs)


def _expected_out(spec: LayerSpec) -> Optional[Tuple[int, ...]]:
    """Output extent a layer must have given its input, or None if free."""
    shape = spec.in_shape
    if spec.kind in ("bn", "relu"):
        return shape
    if spec.kind == "conv":
        if len(shape) != 3 or len(spec.out_shape) != 3:
            return ()
        return (spec.out_shape[0],) + shape[1:]
    if spec.kind == "maxpool":
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            return ()
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "dense":
        if len(shape) != 1 or len(spec.out_shape) != 1:
            return ()
        return spec.out_shape
    return None


def validate_arch(arch: Arch) -> None:
    """
    Check that layer extents chain consistently.

    Raises:
        ValueError: naming the offending layer pair or layer
    """
    if len(arch.input_shape) != 3 or any(int(e) < 1 for e in arch.input_shape):
        raise ValueError(f"Architecture input must be C x H x W with positive extents, got {arch.input_shape}")
    if arch.num_categories < 2:
        raise ValueError(f"Architecture needs at least 2 categories, got {arch.num_categories}")
    if not arch.layers:
        raise ValueError("Architecture has no layers")

    names = [layer.name for layer in arch.layers]
    if len(set(names)) != len(names):
        raise ValueError(f"Layer names must be unique, got {names}")

    previous_name = "input"
    previous_shape = tuple(arch.input_shape)
    for spec in arch.layers:
        if spec.kind not in LAYER_TYPES:
            raise ValueError(f"Layer '{spec.name}' has unknown kind '{spec.kind}'")
        if tuple(spec.in_shape) != previous_shape:
            raise ValueError(
                f"Inconsistent extents between '{previous_name}' and '{spec.name}': "
                f"'{previous_name}' produces {previous_shape} but '{spec.name}' expects {tuple(spec.in_shape)}"
            )
        expected = _expected_out(spec)
        if expected is not None and tuple(spec.out_shape) != expected:
            raise ValueError(
                f"Layer '{spec.name}' ({spec.kind}) cannot map {tuple(spec.in_shape)} to {tuple(spec.out_shape)}"
            )
        if spec.kind == "conv" and (spec.kernel < 1 or spec.kernel % 2 == 0):
            raise ValueError(f"Layer '{spec.name}' needs an odd kernel size, got {spec.kernel}")
        previous_name, previous_shape = spec.name, tuple(spec.out_shape)

    if previous_shape != (arch.num_categories,):
        raise ValueError(
            f"Inconsistent extents between '{previous_name}' and 'output': "
            f"'{previous_name}' produces {previous_shape} but the output needs ({arch.num_categories},)"
        )


def _make_layer(spec: LayerSpec) -> Layer:
    cls = LAYER_TYPES[spec.kind]
    if cls is Conv2D:
        return Conv2D(spec.name, spec.in_shape, spec.out_shape, kernel=spec.kernel)
    return cls(spec.name, spec.in_shape, spec.out_shape)


@lru_cache(maxsize=64)
def _layers(arch: Arch) -> Tuple[Layer, ...]:
    validate_arch(arch)
    return tuple(_make_layer(spec) for spec in arch.layers)


def param_layout(arch: Arch) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, offset) of every trainable parameter in flattening order."""
    layout = []
    offset = 0
    for layer in _layers(arch):
        for name, shape in layer.param_shapes():
            layout.append((name, shape, offset))
            offset += int(np.prod(shape))
    return layout


def buffer_layout(arch: Arch) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, offset) of every BN buffer in flattening order."""
    layout = []
    offset = 0
    for layer in _layers(arch):
        for name, shape in layer.buffer_shapes():
            layout.append((name, shape, offset))
            offset += int(np.prod(shape))
    return layout


def _frozen(values: Dict[str, np.ndarray]) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for name, value in values.items():
        arr = np.array(value, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        out[name] = arr
    return out


@dataclass(frozen=True, eq=False)
class ModelState:
    """
    Trainable parameters and BN running statistics of one model.

    Arrays are copied and made read-only on construction.
    """

    params: "OrderedDict[str, np.ndarray]"
    bn_buffers: "OrderedDict[str, np.ndarray]"
    arch: Arch

    def __post_init__(self):
        object.__setattr__(self, "params", _frozen(self.params))
        object.__setattr__(self, "bn_buffers", _frozen(self.bn_buffers))

        expected_params = [(name, shape) for name, shape, _ in param_layout(self.arch)]
        actual_params = [(name, value.shape) for name, value in self.params.items()]
        if actual_params != expected_params:
            raise ValueError("Parameters do not match the architecture layout")

        expected_buffers = [(name, shape) for name, shape, _ in buffer_layout(self.arch)]
        actual_buffers = [(name, value.shape) for name, value in self.bn_buffers.items()]
        if actual_buffers != expected_buffers:
            raise ValueError("BN buffers do not match the architecture layout")

    @property
    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def buffer_count(self) -> int:
        return sum(v.size for v in self.bn_buffers.values())

    def with_params(self, params: Dict[str, np.ndarray]) -> "ModelState":
        return ModelState(params, self.bn_buffers, self.arch)

    def with_buffers(self, bn_buffers: Dict[str, np.ndarray]) -> "ModelState":
        return ModelState(self.params, bn_buffers, self.arch)

    def equals(self, other: "ModelState") -> bool:
        """Bitwise equality of architecture, parameters and buffers."""
        if self.arch != other.arch:
            return False
        return (
            np.array_equal(flatten_params(self), flatten_params(other))
            and np.array_equal(flatten_buffers(self), flatten_buffers(other))
        )


def build_model(arch: Arch, seed: int) -> ModelState:
    """
    Initialise a model deterministically from a seed.

    Conv and dense weights use He fan-in normal initialisation, biases and
    BN shifts start at 0, BN scales and running variances at 1.
    """
    layers = _layers(arch)
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    buffers = OrderedDict()
    for layer in layers:
        params.update(layer.init_params(rng))
        buffers.update(layer.init_buffers())
    return ModelState(params, buffers, arch)


def _check_batch(model: ModelState, batch: np.ndarray, mode: str) -> np.ndarray:
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be '{TRAIN}' or '{INFER}', got '{mode}'")
    batch = np.asarray(batch, dtype=np.float64)
    expected = tuple(model.arch.input_shape)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ValueError(f"Batch shape {batch.shape} does not match model input N x {expected}")
    if mode == TRAIN and batch.shape[0] < 2:
        raise ValueError("Train-mode forward needs at least 2 samples for batch statistics")
    return batch


def _run(model: ModelState, batch: np.ndarray, train: bool):
    x = batch
    caches = []
    stats = OrderedDict()
    for layer in _layers(model.arch):
        x, cache, layer_stats = layer.forward(x, model.params, model.bn_buffers, train)
        caches.append(cache)
        if layer_stats is not None:
            stats[layer.name] = layer_stats
    return x, caches, stats


def forward(
    model: ModelState,
    batch: np.ndarray,
    mode: str = INFER
) -> Tuple[np.ndarray, Optional["OrderedDict[str, Dict[str, np.ndarray]]"]]:
    """
    Run the model on an N x C x H x W batch.

    Returns:
        (logits N x K, per-BN-layer batch mean/variance in train mode, else None)
    """
    batch = _check_batch(model, batch, mode)
    logits, _, stats = _run(model, batch, mode == TRAIN)
    if mode == INFER:
        return logits, None
    return logits, OrderedDict(
        (name, {"mean": s["mean"], "var": s["var"]}) for name, s in stats.items()
    )


def infer_logits(model: ModelState, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Inference-mode logits for a dataset of any size, evaluated in chunks."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        return np.zeros((0, model.arch.num_categories))
    parts = [forward(model, images[i:i + chunk], INFER)[0] for i in range(0, images.shape[0], chunk)]
    return np.concatenate(parts, axis=0)


def update_running_stats(
    model: ModelState,
    batch_stats: Dict[str, Dict[str, np.ndarray]],
    momentum: float = BN_MOMENTUM
) -> "OrderedDict[str, np.ndarray]":
    """Return the model's BN buffers after one momentum update from batch statistics."""
    buffers = OrderedDict(model.bn_buffers)
    for layer in _layers(model.arch):
        if isinstance(layer, BatchNorm) and layer.name in batch_stats:
            buffers.update(layer.update_running(model.bn_buffers, batch_stats[layer.name], momentum))
    return buffers


@dataclass(frozen=True, eq=False)
class BackwardResult:
    """Gradient of one batch plus the side channel of updated running statistics."""

    gradient: np.ndarray
    loss: float
    per_sample: np.ndarray
    bn_buffers: "OrderedDict[str, np.ndarray]" = field(repr=False)
    batch_stats: Dict[str, Dict[str, np.ndarray]] = field(repr=False)


def backward(
    model: ModelState,
    batch: np.ndarray,
    labels: np.ndarray,
    weights: Optional[CategoryWeights] = None,
    mode: str = TRAIN,
    momentum: float = BN_MOMENTUM
) -> BackwardResult:
    """
    Exact reverse-mode gradient of the (weighted) cross-entropy batch loss.

    BN batch statistics are differentiated as functions of the input. The
    running statistics updated by this batch are returned, never written
    into the model.
    """
    if mode != TRAIN:
        raise ValueError("backward is defined for train mode only")
    batch = _check_batch(model, batch, mode)
    labels = np.asarray(labels, dtype=np.int64)

    logits, caches, stats = _run(model, batch, True)
    loss, per_sample = weighted_ce(logits, labels, weights)
    grad = weighted_ce_grad(logits, labels, weights)

    layers = _layers(model.arch)
    grads: Dict[str, np.ndarray] = {}
    for layer, cache in zip(reversed(layers), reversed(caches)):
        grad, layer_grads = layer.backward(grad, cache, model.params)
        grads.update(layer_grads)

    gradient = np.concatenate([grads[name].ravel() for name in model.params])
    buffers = update_running_stats(model, stats, momentum)
    batch_stats = OrderedDict(
        (name, {"mean": s["mean"], "var": s["var"]}) for name, s in stats.items()
    )
    return BackwardResult(gradient, loss, per_sample, buffers, batch_stats)


def flatten_params(model: ModelState) -> np.ndarray:
    """Concatenate all parameters in architecture order."""
    if not model.params:
        return np.zeros(0)
    return np.concatenate([v.ravel() for v in model.params.values()])


def flatten_buffers(model: ModelState) -> np.ndarray:
    """Concatenate all BN buffers in architecture order."""
    if not model.bn_buffers:
        return np.zeros(0)
    return np.concatenate([v.ravel() for v in model.bn_buffers.values()])


def _unflatten(layout, vector: np.ndarray, what: str) -> "OrderedDict[str, np.ndarray]":
    vector = np.asarray(vector, dtype=np.float64)
    total = sum(int(np.prod(shape)) for _, shape, _ in layout)
    if vector.ndim != 1 or vector.size != total:
        raise ValueError(f"{what} vector has length {vector.size}, expected {total}")
    out = OrderedDict()
    for name, shape, offset in layout:
        size = int(np.prod(shape))
        out[name] = vector[offset:offset + size].reshape(shape)
    return out


def unflatten_params(model: ModelState, vector: np.ndarray) -> ModelState:
    """Return a copy of the model whose parameters are read from a flat vector."""
    return model.with_params(_unflatten(param_layout(model.arch), vector, "Parameter"))


def unflatten_buffers(model: ModelState, vector: np.ndarray) -> ModelState:
    """Return a copy of the model whose BN buffers are read from a flat vector."""
    return model.with_buffers(_unflatten(buffer_layout(model.arch), vector, "Buffer"))


def sgd_step(model: ModelState, gradient: np.ndarray, lr: float) -> ModelState:
    """
    One plain SGD update: params <- params - lr * gradient.

    BN buffers are carried over untouched.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    if lr < 0 or not np.isfinite(lr):
        raise ValueError(f"Learning rate must be a non-negative finite number, got {lr}")
    if gradient.ndim != 1 or gradient.size != model.param_count:
        raise ValueError(
            f"Gradient has length {gradient.size}, expected {model.param_count} parameters"
        )
    return unflatten_params(model, flatten_params(model) - lr * gradient)


def gradient_check(
    model: ModelState,
    batch: np.ndarray,
    labels: np.ndarray,
    weights: Optional[CategoryWeights] = None,
    h: float = 1e-5
) -> Dict[str, object]:
    """
    Compare the analytic gradient against central finite differences.

    Returns:
        Dictionary with 'relative_error' (norm of the difference over the sum
        of norms), 'max_abs_error', 'analytic' and 'numeric' gradients.
    """
    analytic = backward(model, batch, labels, weights).gradient
    theta = flatten_params(model)
    numeric = np.zeros_like(theta)

    for i in range(theta.size):
        plus = theta.copy()
        plus[i] += h
        minus = theta.copy()
        minus[i] -= h
        loss_plus = weighted_ce(forward(unflatten_params(model, plus), batch, TRAIN)[0], labels, weights)[0]
        loss_minus = weighted_ce(forward(unflatten_params(model, minus), batch, TRAIN)[0], labels, weights)[0]
        numeric[i] = (loss_plus - loss_minus) / (2.0 * h)

    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-300)
    return {
        "relative_error": float(diff / scale),
        "max_abs_error": float(np.max(np.abs(analytic - numeric))) if theta.size else 0.0,
        "analytic": analytic,
        "numeric": numeric,
    }
