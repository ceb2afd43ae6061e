"""Pre-training loop: initial clustering, warm-up, then joint iterations.

Each iteration encodes the graph, refreshes the pseudo-labels with one
attention-weighted propagation pass using the same coefficients, and takes
one optimizer step on the cross-entropy against the refreshed labels.  Label
columns are never re-aligned between iterations.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attlpa import label_churn, propagate
from .encoder import (
    ModelParams,
    classify,
    cross_entropy,
    forward,
    init_params,
    is_attention_param,
    loss_and_grad,
)
from .errors import ConfigError, NumericalError, ShapeMismatchError, TrainingDiverged
from .graph import FeatureSet, HinGraph
from .lpa import PseudoLabels, lpa_init

log = logging.getLogger(__name__)

MAX_LABEL_SPACE = 2048


@dataclass
class TrainConfig:
    seed: int = 0
    warmup_epochs: int = 20
    max_epochs: int = 100
    learning_rate: float = 5e-3
    weight_decay: float = 1e-4
    hidden_dims: tuple = (64, 64)
    validation_fraction: float = 0.1
    lpa_max_iters: int = 100
    optimizer: str = "adam"
    final_activation: bool = True
    normalization: str = "row"

    def __post_init__(self):
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        self.validate()

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims)

    def validate(self):
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.lpa_max_iters < 1:
            raise ConfigError("lpa_max_iters must be >= 1")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ConfigError("hidden_dims must be a nonempty list of positive ints")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    loss: float
    val_loss: float
    churn: float
    seconds: float

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    warmup: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    k: int = 0
    converged: bool = False

    def records(self):
        return [r.to_dict() for r in self.warmup + self.epochs]

    def losses(self):
        return [r.loss for r in self.warmup + self.epochs]


class AdamState:
    def __init__(self, params: ModelParams):
        self.step = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction.

    Weight decay is decoupled and applies to projections and the classifier,
    not to attention parameters.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and not is_attention_param(name):
            update = update + weight_decay * p
        p -= lr * update


def sgd_step(params: ModelParams, grads: dict, lr: float, weight_decay: float = 0.0) -> None:
    for name, p in params.tensors.items():
        g = grads[name]
        if weight_decay and not is_attention_param(name):
            g = g + weight_decay * p
        p -= lr * g


def split_validation(n: int, fraction: float, seed: int):
    rng = np.random.default_rng([seed, 1])
    order = rng.permutation(n)
    n_val = max(1, int(round(fraction * n))) if n > 1 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class PretrainResult:
    params: ModelParams
    embeddings: object
    labels: PseudoLabels
    report: TrainReport
    initial_labels: PseudoLabels = None

    def __iter__(self):
        return iter((self.params, self.embeddings, self.labels, self.report))


def pretrain(graph: HinGraph, features: FeatureSet, config: TrainConfig | None = None,
             on_epoch=None) -> PretrainResult:
    """Pre-train the encoder on ``graph``; returns the lowest-validation-loss model.

    ``on_epoch`` is called with every :class:`EpochRecord` as it is produced.
    """
    config = config or TrainConfig()
    config.validate()
    features.check(graph)
    if config.normalization != graph.normalization:
        raise ConfigError(
            f"graph was built with {graph.normalization!r} normalization, config asks for {config.normalization!r}"
        )

    labels0 = lpa_init(graph, rng_seed=config.seed, max_iters=config.lpa_max_iters)
    if labels0.k > MAX_LABEL_SPACE:
        raise ConfigError(
            f"initial clustering produced K={labels0.k} > {MAX_LABEL_SPACE} labels; increase lpa_max_iters"
        )
    rng = np.random.default_rng([config.seed, 2])
    params = init_params(graph.schema, features.dims(), config.hidden_dims, labels0.k, rng,
                         final_activation=config.final_activation)
    train_idx, val_idx = split_validation(graph.num_objects, config.validation_fraction, config.seed)
    state = AdamState(params)
    report = TrainReport(k=labels0.k)

    def step(grads):
        if config.optimizer == "adam":
            adam_step(params, grads, state, config.learning_rate, config.weight_decay)
        else:
            sgd_step(params, grads, config.learning_rate, config.weight_decay)

    def emit(rec):
        if on_epoch is not None:
            on_epoch(rec)

    last_good = params.copy()
    labels = labels0

    def guard(loss, epoch):
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", last_params=last_good, epoch=epoch)

    def evaluate(lab, epoch):
        try:
            table, snapshot = forward(params, graph, features, keep_cache=True)
            if lab is None:
                lab = propagate(snapshot, graph, labels, params.num_layers)
            loss, grads, _ = loss_and_grad(params, graph, features, lab, index=train_idx, table=table)
        except TrainingDiverged:
            raise
        except NumericalError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", last_params=last_good, epoch=epoch) from exc
        guard(loss, epoch)
        val = cross_entropy(classify(params, table), lab, index=val_idx)
        return table, lab, loss, grads, val

    for epoch in range(config.warmup_epochs):
        t0 = time.perf_counter()
        table, _, loss, grads, val = evaluate(labels0, epoch)
        last_good = params.copy()
        step(grads)
        rec = EpochRecord(epoch, "warmup", loss, val, 0.0, time.perf_counter() - t0)
        report.warmup.append(rec)
        emit(rec)

    best = None
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        table, new_labels, loss, grads, val = evaluate(None, config.warmup_epochs + epoch)
        churn = label_churn(labels, new_labels)
        labels = new_labels
        if best is None or val < best[0]:
            table._cache = None
            best = (val, epoch, params.copy(), table, labels)
        last_good = params.copy()
        step(grads)
        rec = EpochRecord(epoch, "joint", loss, val, churn, time.perf_counter() - t0)
        report.epochs.append(rec)
        emit(rec)
        log.debug("epoch %d loss %.4f val %.4f churn %.4f", epoch, loss, val, churn)

    _, best_epoch, best_params, best_table, best_labels = best
    report.best_epoch = best_epoch
    report.converged = bool(report.epochs and report.epochs[-1].churn == 0.0)
    return PretrainResult(best_params, best_table, best_labels, report, labels0)
