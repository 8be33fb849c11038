"""
Federated protocols over a simulated parameter server.

FedSGD exchanges gradients every iteration, FedAVG averages weights after
one local epoch per institution, CWT passes a single model from institution
to institution, and centralized training is the pooled-data baseline. The
server phase of every round is a barrier; institution work inside a round
may run on worker threads without changing any result.
"""

import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datasets import LabeledDataset, concat_datasets
from .evaluation import selection_metric
from .losses import CategoryWeights, class_weights
from .network import (
    Arch,
    ModelState,
    backward,
    build_model,
    flatten_params,
    sgd_step,
)
from .skew import InstitutionShard

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class Method(str, Enum):
    FEDSGD = "fedsgd"
    FEDAVG = "fedavg"
    CWT = "cwt"
    CENTRALIZED = "centralized"


@dataclass(frozen=True)
class ProtocolConfig:
    """
    Settings of one protocol run.

    batch_size None means full-batch training: every minibatch is the
    institution's whole shard (the pooled set for centralized training).
    """

    method: Method
    wp: bool = False
    wl: bool = False
    bn_avg: bool = False
    batch_size: Optional[int] = 32
    learning_rate: float = 0.05
    epochs: int = 10
    model_seed: int = 0
    data_seed: int = 0
    uniform_fedavg: bool = False
    threads: int = 1
    trace: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "method", Method(self.method))
        except ValueError:
            raise ValueError(
                f"Unknown method '{self.method}'; expected one of {', '.join(m.value for m in Method)}"
            )
        if self.batch_size is not None and int(self.batch_size) < 2:
            raise ValueError(f"batch_size must be at least 2 for batch normalisation, got {self.batch_size}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError(f"learning_rate must be a non-negative finite number, got {self.learning_rate}")
        if int(self.epochs) < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if int(self.threads) < 1:
            raise ValueError(f"threads must be at least 1, got {self.threads}")
        if self.bn_avg and self.method in (Method.CWT, Method.CENTRALIZED):
            raise ValueError(f"bn_avg applies to fedsgd and fedavg only, not {self.method.value}")
        if self.uniform_fedavg and self.method != Method.FEDAVG:
            raise ValueError("uniform_fedavg applies to fedavg only")

    @property
    def mitigations(self) -> str:
        """Short label of the enabled mitigations, e.g. 'WP+WL' or 'none'."""
        names = [name for name, on in (("WP", self.wp), ("WL", self.wl), ("BN", self.bn_avg)) if on]
        return "+".join(names) if names else "none"

    def to_dict(self) -> Dict:
        return {
            "method": self.method.value,
            "wp": self.wp,
            "wl": self.wl,
            "bn_avg": self.bn_avg,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "model_seed": self.model_seed,
            "data_seed": self.data_seed,
            "uniform_fedavg": self.uniform_fedavg,
            "threads": self.threads,
            "trace": self.trace,
        }


@dataclass(frozen=True)
class RoundLog:
    """What happened in one FedSGD epoch, FedAVG round, CWT cycle or centralized epoch."""

    round_index: int
    train_loss: Tuple[float, ...]
    validation_metric: Optional[float]
    communication: int
    iterations: int

    def to_dict(self) -> Dict:
        return {
            "round": self.round_index,
            "train_loss": list(self.train_loss),
            "validation_metric": self.validation_metric,
            "communication": self.communication,
            "iterations": self.iterations,
        }


@dataclass(frozen=True, eq=False)
class ProtocolRun:
    """
    Outcome of a protocol: the validation-selected model, the last model,
    per-round logs, and per-institution models of the selected round.
    """

    model: ModelState
    final_model: ModelState
    selected_round: Optional[int]
    logs: Tuple[RoundLog, ...]
    institution_models: Tuple[ModelState, ...]
    trace: Tuple[np.ndarray, ...] = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _check_weights(weights: Sequence[float], n: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"Expected {n} aggregation weights, got {weights.size}")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ValueError(f"Aggregation weights must be finite and non-negative, got {weights.tolist()}")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"Aggregation weights must sum to 1, got {weights.sum()}")
    return weights


def _weighted_sum(arrays: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    out = weights[0] * arrays[0]
    for w, a in zip(weights[1:], arrays[1:]):
        out = out + w * a
    return out


def aggregate_gradients(grads: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """
    Weighted sum of flat gradient vectors.

    Args:
        grads: n gradients of equal length
        weights: n non-negative weights summing to 1 (1/n for plain FedSGD,
            Q_i/Q for proportional weighting)

    Returns:
        sum_i w_i * g_i
    """
    if not grads:
        raise ValueError("No gradients to aggregate")
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    length = grads[0].shape
    if any(g.ndim != 1 or g.shape != length for g in grads):
        raise ValueError(f"Gradients differ in length: {[g.shape for g in grads]}")
    return _weighted_sum(grads, _check_weights(weights, len(grads)))


def _check_archs(models: Sequence[ModelState]) -> None:
    if not models:
        raise ValueError("No models to aggregate")
    for i, model in enumerate(models[1:], start=1):
        if model.arch != models[0].arch:
            raise ValueError(f"Model {i} has a different architecture from model 0")


def aggregate_bn_buffers(models: Sequence[ModelState], weights: Sequence[float]) -> "OrderedDict[str, np.ndarray]":
    """Weighted average of BN running means and variances."""
    _check_archs(models)
    weights = _check_weights(weights, len(models))
    out = OrderedDict()
    for name in models[0].bn_buffers:
        out[name] = _weighted_sum([m.bn_buffers[name] for m in models], weights)
        if name.endswith("running_var") and np.any(out[name] <= 0):
            raise ValueError(f"Averaged running variance '{name}' is not strictly positive")
    return out


def aggregate_weights(
    models: Sequence[ModelState],
    weights: Sequence[float],
    bn_avg: bool = False
) -> ModelState:
    """
    Weighted average of model parameters.

    BN buffers are averaged with the same weights when bn_avg is set and
    otherwise copied from the first model.
    """
    _check_archs(models)
    weights = _check_weights(weights, len(models))
    params = OrderedDict(
        (name, _weighted_sum([m.params[name] for m in models], weights)) for name in models[0].params
    )
    buffers = aggregate_bn_buffers(models, weights) if bn_avg else models[0].bn_buffers
    return ModelState(params, buffers, models[0].arch)


def proportional_weights(sizes: Sequence[int]) -> np.ndarray:
    """Q_i / Q for each institution."""
    sizes = np.asarray(sizes, dtype=np.float64)
    return sizes / sizes.sum()


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


# ---------------------------------------------------------------------------
# Data streams
# ---------------------------------------------------------------------------

class _BatchStream:
    """
    Minibatches of one institution.

    Pass r visits the shard in the order given by default_rng([data_seed,
    institution, r]) and yields floor(Q / B) full batches; the stream rolls
    over to a fresh pass when one is exhausted.
    """

    def __init__(self, dataset: LabeledDataset, batch_size: Optional[int], data_seed: int, institution: int):
        if len(dataset) == 0:
            raise ValueError(f"Institution {institution} has an empty training shard")
        self.dataset = dataset
        self.batch_size = batch_size
        self.data_seed = data_seed
        self.institution = institution
        self.per_pass = 1 if batch_size is None else len(dataset) // batch_size
        if self.per_pass == 0:
            raise ValueError(
                f"Institution {institution} has {len(dataset)} samples, fewer than one batch of {batch_size}"
            )
        self._pass = -1
        self._order = None
        self._position = self.per_pass

    def next_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.batch_size is None:
            return self.dataset.images, self.dataset.labels
        if self._position == self.per_pass:
            self._pass += 1
            rng = np.random.default_rng([self.data_seed, self.institution, self._pass])
            self._order = rng.permutation(len(self.dataset))
            self._position = 0
        start = self._position * self.batch_size
        idx = self._order[start:start + self.batch_size]
        self._position += 1
        return self.dataset.images[idx], self.dataset.labels[idx]


def _local_weights(dataset: LabeledDataset, wl: bool) -> Optional[CategoryWeights]:
    if not wl:
        return None
    try:
        return class_weights(dataset.histogram())
    except ValueError as e:
        raise ValueError(f"Weighted loss undefined for this shard: {e}")


def _train_step(
    model: ModelState,
    stream: _BatchStream,
    weights: Optional[CategoryWeights],
    lr: float
) -> Tuple[ModelState, float]:
    images, labels = stream.next_batch()
    result = backward(model, images, labels, weights)
    return sgd_step(model, result.gradient, lr).with_buffers(result.bn_buffers), result.loss


def _map(threads: int, fn: Callable, items: Sequence) -> List:
    """Run fn over items, on worker threads when threads > 1; results keep item order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Selection bookkeeping
# ---------------------------------------------------------------------------

class _Selector:
    """Keeps the round with the strictly lowest validation metric (earliest on ties)."""

    def __init__(self, val_sets: Sequence[LabeledDataset], wl: bool):
        self.val_sets = [v for v in val_sets if v is not None and len(v) > 0]
        self.wl = wl
        self.best_metric = np.inf
        self.best_round: Optional[int] = None
        self.best_model: Optional[ModelState] = None
        self.best_institutions: Tuple[ModelState, ...] = ()

    def score(self, model: ModelState) -> Optional[float]:
        if not self.val_sets:
            return None
        metric = selection_metric(model, self.val_sets, self.wl)
        if not np.isfinite(metric):
            logger.warning(f"Validation metric is not finite ({metric}); round cannot be selected")
        return metric

    def offer(self, round_index: int, metric: Optional[float], model: ModelState, institutions: Sequence[ModelState]):
        if metric is None:
            better = True
        else:
            better = np.isfinite(metric) and (self.best_round is None or metric < self.best_metric)
        if better:
            self.best_metric = np.inf if metric is None else metric
            self.best_round = round_index
            self.best_model = model
            self.best_institutions = tuple(institutions)

    def result(self, initial: ModelState, final: ModelState, logs, trace, n: int) -> ProtocolRun:
        if self.best_model is None:
            model, institutions = initial, (initial,) * n
        else:
            model, institutions = self.best_model, self.best_institutions
        return ProtocolRun(model, final, self.best_round, tuple(logs), institutions, tuple(trace))


def _validation_sets(shards: Sequence[InstitutionShard]) -> List[LabeledDataset]:
    return [s.val for s in shards if s.val is not None]


def _check_shards(shards: Sequence[InstitutionShard], cfg: ProtocolConfig, method: Method) -> None:
    if cfg.method != method:
        raise ValueError(f"Configuration is for {cfg.method.value}, not {method.value}")
    if not shards:
        raise ValueError("No institution shards given")
    for shard in shards:
        if shard.size == 0:
            raise ValueError(f"Institution {shard.institution_id} has an empty training shard")


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------

def run_fedsgd(shards: Sequence[InstitutionShard], cfg: ProtocolConfig, arch: Arch) -> ProtocolRun:
    """
    Federated SGD: one aggregated gradient step per iteration.

    Each iteration every institution computes a gradient on its next
    minibatch; the server combines them with uniform weights (Q_i/Q when wp
    is set), takes one SGD step and broadcasts the parameters. An epoch is
    floor(Q_max / B) iterations; smaller institutions cycle through fresh
    passes of their shard. With bn_avg the running-statistic updates are
    averaged with the same weights; otherwise each institution keeps its own
    and the server model carries institution 0's.
    """
    _check_shards(shards, cfg, Method.FEDSGD)
    n = len(shards)
    sizes = [s.size for s in shards]
    weights = proportional_weights(sizes) if cfg.wp else uniform_weights(n)
    streams = [_BatchStream(s.train, cfg.batch_size, cfg.data_seed, i) for i, s in enumerate(shards)]
    loss_weights = [_local_weights(s.train, cfg.wl) for s in shards]
    # Drop-last rounding: floor(Q_max / B), which equals the centralized epoch when n == 1
    iterations = max(stream.per_pass for stream in streams)

    initial = build_model(arch, cfg.model_seed)
    model = initial
    buffers = [initial.bn_buffers] * n
    selector = _Selector(_validation_sets(shards), cfg.wl)
    logs, trace = [], []

    for epoch in range(int(cfg.epochs)):
        losses = np.zeros(n)
        for _ in range(iterations):
            def _gradient(i):
                images, labels = streams[i].next_batch()
                return backward(model.with_buffers(buffers[i]), images, labels, loss_weights[i])

            results = _map(cfg.threads, _gradient, range(n))
            gradient = aggregate_gradients([r.gradient for r in results], weights)
            losses += [r.loss for r in results]

            local = [model.with_buffers(r.bn_buffers) for r in results]
            if cfg.bn_avg:
                shared = aggregate_bn_buffers(local, weights)
                buffers = [shared] * n
            else:
                buffers = [r.bn_buffers for r in results]
            model = sgd_step(model, gradient, cfg.learning_rate).with_buffers(buffers[0])
            if cfg.trace:
                trace.append(flatten_params(model))

        metric = selector.score(model)
        log = RoundLog(epoch, tuple(float(x) for x in losses / iterations), metric, 2 * n * iterations, iterations)
        logs.append(log)
        selector.offer(epoch, metric, model, [model.with_buffers(b) for b in buffers])
        logger.info(f"fedsgd epoch {epoch}: mean train loss {np.mean(log.train_loss):.4f}, validation {metric}")

    return selector.result(initial, model, logs, trace, n)


def run_fedavg(shards: Sequence[InstitutionShard], cfg: ProtocolConfig, arch: Arch) -> ProtocolRun:
    """
    Federated averaging: one local epoch per institution, then a weighted
    average of the parameters.

    Institution i runs floor(Q_i / B) local steps per round. Aggregation uses
    Q_i/Q weights (uniform with uniform_fedavg). BN buffers join the average
    when bn_avg is set; otherwise every institution keeps its own running
    statistics and only parameters are broadcast.

    Raises:
        ValueError: If an institution has fewer samples than one minibatch
    """
    _check_shards(shards, cfg, Method.FEDAVG)
    n = len(shards)
    sizes = [s.size for s in shards]
    weights = uniform_weights(n) if cfg.uniform_fedavg else proportional_weights(sizes)
    streams = [_BatchStream(s.train, cfg.batch_size, cfg.data_seed, i) for i, s in enumerate(shards)]
    loss_weights = [_local_weights(s.train, cfg.wl) for s in shards]
    steps = [stream.per_pass for stream in streams]

    initial = build_model(arch, cfg.model_seed)
    model = initial
    buffers = [initial.bn_buffers] * n
    selector = _Selector(_validation_sets(shards), cfg.wl)
    logs, trace = [], []

    for round_index in range(int(cfg.epochs)):
        def _local_epoch(i):
            local = model.with_buffers(buffers[i])
            total = 0.0
            for _ in range(steps[i]):
                local, loss = _train_step(local, streams[i], loss_weights[i], cfg.learning_rate)
                total += loss
            return local, total / steps[i]

        results = _map(cfg.threads, _local_epoch, range(n))
        local_models = [m for m, _ in results]
        aggregated = aggregate_weights(local_models, weights, bn_avg=cfg.bn_avg)
        if cfg.bn_avg:
            buffers = [aggregated.bn_buffers] * n
        else:
            buffers = [m.bn_buffers for m in local_models]
        model = aggregated.with_buffers(buffers[0])
        if cfg.trace:
            trace.append(flatten_params(model))

        metric = selector.score(model)
        log = RoundLog(round_index, tuple(float(loss) for _, loss in results), metric, 2 * n, int(max(steps)))
        logs.append(log)
        selector.offer(round_index, metric, model, [model.with_buffers(b) for b in buffers])
        logger.info(f"fedavg round {round_index}: mean train loss {np.mean(log.train_loss):.4f}, validation {metric}")

    return selector.result(initial, model, logs, trace, n)


def cwt_visit_budgets(sizes: Sequence[int], batch_size: Optional[int], wp: bool) -> List[int]:
    """
    Iterations per CWT visit: floor(Q / (B * n)) for every institution, or
    floor(Q_i / B) with proportional budgets. Full-batch mode visits take one step.
    """
    n = len(sizes)
    if batch_size is None:
        budgets = [1] * n
    elif wp:
        budgets = [int(q) // batch_size for q in sizes]
    else:
        budgets = [int(sum(sizes)) // (batch_size * n)] * n
    for i, budget in enumerate(budgets):
        if budget == 0:
            raise ValueError(f"Institution {i} would train zero iterations per visit")
    return budgets


def run_cwt(shards: Sequence[InstitutionShard], cfg: ProtocolConfig, arch: Arch) -> ProtocolRun:
    """
    Cyclical weight transfer: a single model visits the institutions in a
    fixed order; one cycle through all of them is one round.
    """
    _check_shards(shards, cfg, Method.CWT)
    n = len(shards)
    budgets = cwt_visit_budgets([s.size for s in shards], cfg.batch_size, cfg.wp)
    streams = [_BatchStream(s.train, cfg.batch_size, cfg.data_seed, i) for i, s in enumerate(shards)]
    loss_weights = [_local_weights(s.train, cfg.wl) for s in shards]

    initial = build_model(arch, cfg.model_seed)
    model = initial
    selector = _Selector(_validation_sets(shards), cfg.wl)
    logs, trace = [], []

    for cycle in range(int(cfg.epochs)):
        losses = []
        for i in range(n):
            total = 0.0
            for _ in range(budgets[i]):
                model, loss = _train_step(model, streams[i], loss_weights[i], cfg.learning_rate)
                total += loss
                if cfg.trace:
                    trace.append(flatten_params(model))
            losses.append(total / budgets[i])

        metric = selector.score(model)
        log = RoundLog(cycle, tuple(losses), metric, n, int(sum(budgets)))
        logs.append(log)
        selector.offer(cycle, metric, model, [model] * n)
        logger.info(f"cwt cycle {cycle}: mean train loss {np.mean(losses):.4f}, validation {metric}")

    return selector.result(initial, model, logs, trace, n)


def run_centralized(
    dataset: LabeledDataset,
    cfg: ProtocolConfig,
    arch: Arch,
    val_sets: Sequence[LabeledDataset] = ()
) -> ProtocolRun:
    """
    Minibatch SGD on pooled data, the centrally hosted baseline.

    Uses the data stream of institution 0, so a one-institution run of any
    federated protocol follows exactly the same trajectory.
    """
    if cfg.method != Method.CENTRALIZED:
        raise ValueError(f"Configuration is for {cfg.method.value}, not centralized")
    if len(dataset) == 0:
        raise ValueError("Centralized training needs a non-empty dataset")
    stream = _BatchStream(dataset, cfg.batch_size, cfg.data_seed, 0)
    loss_weights = _local_weights(dataset, cfg.wl)

    initial = build_model(arch, cfg.model_seed)
    model = initial
    selector = _Selector(val_sets, cfg.wl)
    logs, trace = [], []

    for epoch in range(int(cfg.epochs)):
        total = 0.0
        for _ in range(stream.per_pass):
            model, loss = _train_step(model, stream, loss_weights, cfg.learning_rate)
            total += loss
            if cfg.trace:
                trace.append(flatten_params(model))

        metric = selector.score(model)
        log = RoundLog(epoch, (total / stream.per_pass,), metric, 0, stream.per_pass)
        logs.append(log)
        selector.offer(epoch, metric, model, [model])
        logger.info(f"centralized epoch {epoch}: train loss {log.train_loss[0]:.4f}, validation {metric}")

    return selector.result(initial, model, logs, trace, 1)


def validate_shards(shards: Sequence[InstitutionShard], cfg: ProtocolConfig) -> None:
    """
    Check that cfg can train on these shards before any step is taken.

    Covers empty shards, shards smaller than one minibatch and, with wl,
    categories missing from a shard (from the pooled data for centralized
    training).

    Raises:
        ValueError: Naming the first institution that cannot be trained on
    """
    if not shards:
        raise ValueError("No institution shards given")
    if cfg.method == Method.CENTRALIZED:
        datasets = [concat_datasets([s.train for s in shards])]
    else:
        datasets = [s.train for s in shards]
    for i, dataset in enumerate(datasets):
        _BatchStream(dataset, cfg.batch_size, cfg.data_seed, i)
        try:
            _local_weights(dataset, cfg.wl)
        except ValueError as e:
            raise ValueError(f"Institution {i}: {e}")


def run_protocol(shards: Sequence[InstitutionShard], cfg: ProtocolConfig, arch: Arch) -> ProtocolRun:
    """Dispatch on cfg.method; centralized training pools the shards' training data."""
    try:
        if cfg.method == Method.FEDSGD:
            return run_fedsgd(shards, cfg, arch)
        if cfg.method == Method.FEDAVG:
            return run_fedavg(shards, cfg, arch)
        if cfg.method == Method.CWT:
            return run_cwt(shards, cfg, arch)
        pooled = concat_datasets([s.train for s in shards])
        return run_centralized(pooled, cfg, arch, _validation_sets(shards))
    except Exception as e:
        logger.error(f"Failed to run {cfg.method.value}: {e}")
        raise
