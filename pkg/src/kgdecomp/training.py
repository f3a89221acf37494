"""Training regimes, losses and optimizers.

Two regimes are supported:

* ``one-one``: each positive triple is paired with corrupted negatives and
  optimized with a pairwise margin ranking loss (the usual setup for
  DistMult and ComplEx, with Adagrad and unit-norm entity rows).
* ``one-N``: each ``(s, r)`` query is scored against every entity and
  optimized with multi-label binary cross-entropy (the usual setup for
  RESCAL, with Adam). Needs a reciprocal-augmented graph so that subject
  prediction is covered by the reciprocal queries.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import KnowledgeGraph, Triple
from .errors import ConfigError, NumericalError, ShapeError
from .models import KGEModel

logger = logging.getLogger(__name__)

REGIMES = ("one-one", "one-N")
OPTIMIZERS = ("adagrad", "adam")

# search ranges used for grid expansion
ADAGRAD_LR_GRID = (0.08, 0.10, 0.12)
ADAM_LR_GRID = (0.01, 0.005, 0.001, 0.0005)


@dataclass
class TrainConfig:
    regime: str = "one-one"
    optimizer: str = "adagrad"
    learning_rate: float = 0.1
    margin: float = 1.0
    epochs: int = 500
    batch_size: int | None = None
    negatives_per_positive: int = 1
    label_smoothing: float = 0.0
    constrain_entity_norm: bool = True
    post_decom_normalize: bool = False
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size is None:
            self.batch_size = 512 if self.regime == "one-one" else 128

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def scorer_defaults(cls, scorer: str, **overrides) -> "TrainConfig":
        """One-one/Adagrad for DistMult and ComplEx, one-N/Adam for RESCAL."""
        if scorer == "rescal":
            base = dict(regime="one-N", optimizer="adam", learning_rate=0.001, constrain_entity_norm=False)
        else:
            base = dict(regime="one-one", optimizer="adagrad", learning_rate=0.1, constrain_entity_norm=True)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.regime == "one-one" and self.margin <= 0:
            raise ConfigError("margin must be positive for one-one training")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs must be >= 0, batch_size and eval_every >= 1")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    triples_seen: int
    wall_seconds: float
    valid_mrr: float | None = None


# --------------------------------------------------------------------------
# negatives and losses


def sample_negative(triple: Triple, n_entities: int, rng: np.random.Generator) -> Triple:
    """Corrupt the subject or the object (each with probability 1/2).

    The replacement is uniform over the other ``n_entities - 1`` entities. The
    result is not checked against known true triples.
    """
    neg = corrupt_batch(np.asarray([triple], dtype=np.int64), n_entities, rng)[0]
    return Triple(*map(int, neg))


def corrupt_batch(triples: np.ndarray, n_entities: int, rng: np.random.Generator) -> np.ndarray:
    if n_entities < 2:
        raise ConfigError("negative sampling needs at least 2 entities")
    n = len(triples)
    corrupt_subject = rng.random(n) < 0.5
    col = np.where(corrupt_subject, 0, 2)
    original = triples[np.arange(n), col]
    replacement = rng.integers(0, n_entities - 1, size=n)
    replacement = replacement + (replacement >= original)
    out = triples.copy()
    out[np.arange(n), col] = replacement
    return out


def margin_ranking_loss(pos: Tensor, neg: Tensor, margin: float) -> Tensor:
    """Mean of ``max(0, margin - pos + neg)``.

    At the hinge point (``pos - neg == margin``) the subgradient is 0.
    """
    if margin <= 0:
        raise ConfigError("margin must be positive")
    slack = margin - pos.data + neg.data
    active = slack > 0
    n = slack.size

    def backward(g):
        gl = g * active / n
        return -gl, gl

    # np.maximum keeps NaN visible to the non-finite loss check
    return Tensor.from_op(np.asarray(np.maximum(slack, 0.0).mean()), (pos, neg), backward)


def bce_1n_loss(scores: Tensor, targets: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean binary cross-entropy of logits against 0/1 targets.

    Positive targets become ``1 - label_smoothing`` and negatives
    ``label_smoothing / n_entities``. Uses the stable form
    ``max(x, 0) - x*y + log(1 + exp(-|x|))``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != scores.shape:
        raise ShapeError(f"targets {targets.shape} do not match scores {scores.shape}")
    n_ent = scores.shape[-1]
    y = np.where(targets > 0, 1.0 - label_smoothing, label_smoothing / n_ent)
    x = scores.data
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * (sig - y) / n,)

    return Tensor.from_op(np.asarray(loss.mean()), (scores,), backward)


# --------------------------------------------------------------------------
# optimizers


class Optimizer:
    """Base for optimizers keyed by registry name."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float):
        self.named_params = named_params
        self.lr = lr

    def step(self) -> None:
        for name, p in self.named_params:
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(f"{name}: gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
            self._update(name, p.data, p.grad)

    def _update(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        raise NotImplementedError


class Adagrad(Optimizer):
    eps = 1e-10

    def __init__(self, named_params, lr):
        super().__init__(named_params, lr)
        self.accum = {name: np.zeros_like(p.data) for name, p in named_params}

    def _update(self, name, param, grad):
        acc = self.accum[name]
        acc += grad * grad
        param -= self.lr * grad / (np.sqrt(acc) + self.eps)

    def state_dict(self):
        return {f"{name}.accum": a.copy() for name, a in self.accum.items()}

    def load_state_dict(self, state):
        for name in self.accum:
            self.accum[name] = np.array(state[f"{name}.accum"], dtype=np.float64)


class Adam(Optimizer):
    def __init__(self, named_params, lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(named_params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}
        self.t = 0

    def step(self):
        self.t += 1
        super().step()

    def _update(self, name, param, grad):
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1 ** self.t)
        v_hat = v / (1 - self.beta2 ** self.t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        state = {f"{name}.m": a.copy() for name, a in self.m.items()}
        state.update({f"{name}.v": a.copy() for name, a in self.v.items()})
        state["step"] = np.array([float(self.t)])
        return state

    def load_state_dict(self, state):
        for name in self.m:
            self.m[name] = np.array(state[f"{name}.m"], dtype=np.float64)
            self.v[name] = np.array(state[f"{name}.v"], dtype=np.float64)
        self.t = int(state["step"][0])


def make_optimizer(model: KGEModel, cfg: TrainConfig) -> Optimizer:
    params = model.named_parameters()
    return Adagrad(params, cfg.learning_rate) if cfg.optimizer == "adagrad" else Adam(params, cfg.learning_rate)


def constrain_entity_norms(model: KGEModel) -> int:
    """Project every non-reserved entity row to unit L2 norm (no gradient).

    Returns the number of zero rows left unchanged.
    """
    return ad.normalize_rows_(model.entity_table.data, 0, model.n_entities)


# --------------------------------------------------------------------------
# epochs


def _check_pairing(model: KGEModel, graph: KnowledgeGraph, cfg: TrainConfig) -> None:
    cfg.validate()
    if cfg.regime == "one-N" and not graph.reciprocal_augmented:
        raise ConfigError("one-N training needs a reciprocal-augmented graph")
    if cfg.post_decom_normalize and not model.config.entity_decom.post_l2_normalize:
        raise ConfigError("post_decom_normalize needs an entity decom spec with post_l2_normalize enabled")
    if (model.n_entities, model.n_base_relations) != (graph.n_entities, graph.n_base_relations):
        raise ConfigError("model table sizes do not match the graph")


def _batches(n: int, size: int) -> list[slice]:
    bounds = list(range(0, n, size)) + [n]
    # a trailing single-row batch would give batch norm one sample per channel
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def one_n_queries(graph: KnowledgeGraph) -> tuple[np.ndarray, dict[tuple[int, int], list[int]]]:
    """Sorted unique ``(s, r)`` queries of the train split and their train objects."""
    targets: dict[tuple[int, int], list[int]] = {}
    for s, r, o in graph.train:
        targets.setdefault((int(s), int(r)), []).append(int(o))
    keys = np.array(sorted(targets), dtype=np.int64).reshape(-1, 2)
    return keys, targets


def _step(model: KGEModel, loss: Tensor, optimizer: Optimizer, epoch: int, batch_no: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} in epoch {epoch}, batch {batch_no}")
    model.zero_grad()
    loss.backward()
    optimizer.step()
    return value


def train_epoch(model: KGEModel, graph: KnowledgeGraph, cfg: TrainConfig, optimizer: Optimizer,
                rng: np.random.Generator, epoch: int = 0) -> EpochStats:
    _check_pairing(model, graph, cfg)
    start = time.perf_counter()
    losses = []
    if cfg.regime == "one-one":
        train = graph.train
        order = rng.permutation(len(train))
        for b, sl in enumerate(_batches(len(train), cfg.batch_size)):
            pos = np.repeat(train[order[sl]], cfg.negatives_per_positive, axis=0)
            neg = corrupt_batch(pos, graph.n_entities, rng)
            both = np.concatenate([pos, neg])
            scores = model.score(both[:, 0], both[:, 1], both[:, 2], training=True, rng=rng)
            n = len(pos)
            loss = margin_ranking_loss(ad.rows(scores, 0, n), ad.rows(scores, n, 2 * n), cfg.margin)
            losses.append(_step(model, loss, optimizer, epoch, b))
            if cfg.constrain_entity_norm:
                constrain_entity_norms(model)
        seen = len(train)
    else:
        keys, targets = one_n_queries(graph)
        order = rng.permutation(len(keys))
        for b, sl in enumerate(_batches(len(keys), cfg.batch_size)):
            batch = keys[order[sl]]
            y = np.zeros((len(batch), graph.n_entities))
            for i, (s, r) in enumerate(batch):
                y[i, targets[(int(s), int(r))]] = 1.0
            scores = model.score_all_objects(batch[:, 0], batch[:, 1], training=True, rng=rng)
            loss = bce_1n_loss(scores, y, cfg.label_smoothing)
            losses.append(_step(model, loss, optimizer, epoch, b))
            if cfg.constrain_entity_norm:
                constrain_entity_norms(model)
        seen = len(keys)
    mean_loss = float(np.mean(losses)) if losses else 0.0
    return EpochStats(epoch, mean_loss, seen, time.perf_counter() - start)


# --------------------------------------------------------------------------
# full runs


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_mrr: float | None
    stats: list[EpochStats] = field(default_factory=list)


@dataclass
class Trainer:
    """Stateful wrapper so a run can be checkpointed and resumed exactly.

    The epoch counter, optimizer state and the generator state are all part
    of :meth:`training_state`.
    """

    model: KGEModel
    graph: KnowledgeGraph
    cfg: TrainConfig
    epoch: int = 0

    def __post_init__(self):
        _check_pairing(self.model, self.graph, self.cfg)
        self.optimizer = make_optimizer(self.model, self.cfg)
        self.rng = np.random.default_rng(self.cfg.seed)

    def run_epoch(self) -> EpochStats:
        self.epoch += 1
        return train_epoch(self.model, self.graph, self.cfg, self.optimizer, self.rng, self.epoch)

    def training_state(self) -> tuple[dict[str, np.ndarray], dict]:
        meta = {"epoch": self.epoch, "rng": self.rng.bit_generator.state, "train_config": self.cfg.to_dict()}
        return self.optimizer.state_dict(), meta

    def restore(self, optimizer_state: dict[str, np.ndarray], meta: dict) -> None:
        self.optimizer.load_state_dict(optimizer_state)
        self.rng.bit_generator.state = meta["rng"]
        self.epoch = int(meta["epoch"])


def train(model: KGEModel, graph: KnowledgeGraph, cfg: TrainConfig,
          evaluate_fn: Callable[[KGEModel], float] | None = None,
          log_path: str | Path | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs keeping the state with the best validation MRR.

    Validation runs every ``cfg.eval_every`` epochs and after the last one;
    ties keep the earlier epoch. ``evaluate_fn`` defaults to filtered MRR on
    the base-relation triples of the valid split.
    """
    if evaluate_fn is None:
        from .evaluation import evaluate

        valid = graph.base_triples("valid")
        if len(valid) == 0:
            raise ConfigError("training with model selection needs a non-empty valid split")

        def evaluate_fn(m):
            return evaluate(m, valid, graph).mrr

    trainer = Trainer(model, graph, cfg)
    result = TrainResult(model.state_dict(), 0, None)
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for _ in range(cfg.epochs):
            stats = trainer.run_epoch()
            if stats.epoch % cfg.eval_every == 0 or stats.epoch == cfg.epochs:
                stats.valid_mrr = float(evaluate_fn(model))
                if result.best_mrr is None or stats.valid_mrr > result.best_mrr:
                    result.best_mrr = stats.valid_mrr
                    result.best_epoch = stats.epoch
                    result.best_state = model.state_dict()
            result.stats.append(stats)
            logger.info("epoch %d loss %.6f valid_mrr %s", stats.epoch, stats.mean_loss, stats.valid_mrr)
            if log:
                log.write(json.dumps(asdict(stats)) + "\n")
                log.flush()
    finally:
        if log:
            log.close()
    return result
