"""Bilinear scorers (RESCAL, DistMult, ComplEx) with optional decompression networks.

Every scorer is written as ``score(s, r, o) = <q(s, r), e_o>`` where ``q`` is
an object-side query vector, which makes scoring against every candidate
entity a single matrix product. ComplEx rows are stored as ``real || imag``.

A decompression network maps a stored embedding row to a wider row before
scoring: ``fc`` is an affine layer, ``conv`` a single-input-channel 1-D
convolution whose channels are flattened channel-major. Either is optionally
followed by batch normalization and dropout. One network is shared by the
subject and object positions; relations get their own.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ConfigError, DataError

SCORERS = ("rescal", "distmult", "complex")
DECOM_KINDS = ("none", "fc", "conv")
RESERVED_ROWS = 2


@dataclass
class DeComSpec:
    """Decompression network for one target (entities or relations).

    ``out_dim`` counts embedding coordinates: complex coordinates for
    ComplEx, and the side ``D`` of the ``D x D`` matrix for RESCAL relations.
    """

    kind: str = "none"
    out_dim: int = 0
    conv_channels: int = 4
    conv_ksize: int = 3
    conv_bias: bool = True
    use_batchnorm: bool = True
    dropout_rate: float = 0.0
    post_l2_normalize: bool = False

    @property
    def enabled(self) -> bool:
        return self.kind != "none"

    @classmethod
    def from_dict(cls, data: dict | None) -> "DeComSpec":
        if data is None:
            return cls()
        if isinstance(data, cls):
            return data
        _reject_unknown(cls, data, "decom spec")
        return cls(**data)


@dataclass
class ModelConfig:
    scorer: str = "distmult"
    d_e: int = 100
    d_r: int | None = None
    entity_decom: DeComSpec = field(default_factory=DeComSpec)
    relation_decom: DeComSpec = field(default_factory=DeComSpec)
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.entity_decom = DeComSpec.from_dict(self.entity_decom)
        self.relation_decom = DeComSpec.from_dict(self.relation_decom)
        if self.d_r is None:
            self.d_r = self.d_e

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        _reject_unknown(cls, data, "model config")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def complex_factor(self) -> int:
        return 2 if self.scorer == "complex" else 1

    @property
    def entity_width(self) -> int:
        """Stored entity row width."""
        return self.complex_factor * self.d_e

    @property
    def relation_width(self) -> int:
        """Stored relation row width."""
        if self.scorer == "rescal" and not self.relation_decom.enabled:
            return self.d_r * self.d_r
        return self.complex_factor * self.d_r

    @property
    def scoring_dim(self) -> int:
        """Entity embedding size seen by the scorer (complex coordinates for ComplEx)."""
        return self.entity_decom.out_dim if self.entity_decom.enabled else self.d_e

    def validate(self) -> None:
        if self.scorer not in SCORERS:
            raise ConfigError(f"unknown scorer {self.scorer!r}; expected one of {SCORERS}")
        if self.d_e < 1 or self.d_r < 1:
            raise ConfigError("embedding sizes must be positive")
        if self.init_scale <= 0:
            raise ConfigError("init_scale must be positive")
        for target, spec in (("entity", self.entity_decom), ("relation", self.relation_decom)):
            if spec.kind not in DECOM_KINDS:
                raise ConfigError(f"unknown decom kind {spec.kind!r}; expected one of {DECOM_KINDS}")
            if not spec.enabled:
                continue
            if spec.out_dim < 1:
                raise ConfigError(f"{target} decom needs a positive out_dim")
            if not 0.0 <= spec.dropout_rate < 1.0:
                raise ConfigError(f"{target} decom dropout_rate must be in [0, 1)")
            if spec.kind == "conv":
                if self.scorer == "rescal" and target == "relation":
                    raise ConfigError("convolutional decompression of RESCAL relation matrices is unsupported")
                d_in = self.d_e if target == "entity" else self.d_r
                if spec.conv_channels < 1 or spec.conv_ksize < 1:
                    raise ConfigError(f"{target} conv decom needs positive channels and kernel size")
                if spec.out_dim != spec.conv_channels * d_in:
                    raise ConfigError(f"{target} conv decom: out_dim must equal conv_channels * {d_in}")
            if spec.post_l2_normalize and target == "relation":
                raise ConfigError("post_l2_normalize applies to entity decompression only")
        rel_dim = self.relation_decom.out_dim if self.relation_decom.enabled else self.d_r
        if rel_dim != self.scoring_dim:
            raise ConfigError(f"relation size {rel_dim} must match entity size {self.scoring_dim} for {self.scorer}")


def _reject_unknown(cls, data: dict, what: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")


# --------------------------------------------------------------------------
# parameter layout


def table_rows(n_entities: int, n_base_relations: int) -> tuple[int, int]:
    return n_entities + RESERVED_ROWS, 2 * n_base_relations + RESERVED_ROWS


def _decom_shapes(prefix: str, spec: DeComSpec, d_in: int, factor: int, matrix: bool) -> list[tuple[str, tuple]]:
    if not spec.enabled:
        return []
    if spec.kind == "fc":
        width = spec.out_dim ** 2 if matrix else factor * spec.out_dim
        shapes = [(f"{prefix}.weight", (factor * d_in, width)), (f"{prefix}.bias", (width,))]
        bn = width
    else:
        shapes = [(f"{prefix}.kernels", (spec.conv_channels, 1, spec.conv_ksize))]
        if spec.conv_bias:
            shapes.append((f"{prefix}.bias", (spec.conv_channels,)))
        bn = spec.conv_channels
    if spec.use_batchnorm:
        shapes += [(f"{prefix}.bn.gamma", (bn,)), (f"{prefix}.bn.beta", (bn,))]
    return shapes


def parameter_shapes(config: ModelConfig, n_entities: int, n_base_relations: int) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list of every trainable tensor."""
    config.validate()
    ent_rows, rel_rows = table_rows(n_entities, n_base_relations)
    factor = config.complex_factor
    shapes = [("entity_table", (ent_rows, config.entity_width)),
              ("relation_table", (rel_rows, config.relation_width))]
    shapes += _decom_shapes("entity_decom", config.entity_decom, config.d_e, factor, False)
    shapes += _decom_shapes("relation_decom", config.relation_decom, config.d_r, factor,
                            config.scorer == "rescal")
    return shapes


def count_parameters(config: ModelConfig, n_entities: int, n_base_relations: int) -> int:
    """Number of trainable scalars; batch-norm running statistics are excluded."""
    return sum(math.prod(shape) for _, shape in parameter_shapes(config, n_entities, n_base_relations))


def parameter_breakdown(config: ModelConfig, n_entities: int, n_base_relations: int) -> list[tuple[str, tuple, int]]:
    return [(name, shape, math.prod(shape)) for name, shape in parameter_shapes(config, n_entities, n_base_relations)]


# --------------------------------------------------------------------------
# decompression networks


class Decompressor:
    """One decompression network; see the module docstring for the layout."""

    def __init__(self, prefix: str, spec: DeComSpec, d_in: int, factor: int, matrix: bool,
                 shapes: dict[str, tuple], rng: np.random.Generator):
        self.prefix = prefix
        self.spec = spec
        self.d_in = d_in
        self.factor = factor
        self.matrix = matrix
        self.params: dict[str, Tensor] = {}
        self.bn: BatchNormState | None = None
        for name, shape in shapes.items():
            if not name.startswith(prefix + "."):
                continue
            local = name[len(prefix) + 1:]
            if local.startswith("bn."):
                continue
            fan_in = shape[0] if spec.kind == "fc" else spec.conv_ksize
            if local == "bias" and spec.kind == "fc":
                fan_in = shapes[f"{prefix}.weight"][0]
            bound = 1.0 / math.sqrt(fan_in)
            self.params[local] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        if spec.use_batchnorm:
            self.bn = BatchNormState.create(shapes[f"{prefix}.bn.gamma"][0])
            self.params["bn.gamma"] = self.bn.gamma
            self.params["bn.beta"] = self.bn.beta

    def __call__(self, x: Tensor, training: bool, rng: np.random.Generator | None) -> Tensor:
        spec = self.spec
        n = x.shape[0]
        if x.ndim != 2 or x.shape[1] != self.factor * self.d_in:
            raise DataError(f"{self.prefix}: expected rows of width {self.factor * self.d_in}, got {x.shape}")
        if spec.kind == "fc":
            h = ad.linear(x, self.params["weight"], self.params["bias"])
            if self.bn is not None:
                h = ad.batchnorm(h, self.bn, training)
            h = ad.dropout(h, spec.dropout_rate, rng, training)
        else:
            # real and imaginary halves are convolved as separate signals
            sig = ad.reshape(x, (n * self.factor, 1, self.d_in))
            h = ad.conv1d(sig, self.params["kernels"], self.params.get("bias"))
            if self.bn is not None:
                h = ad.batchnorm(h, self.bn, training)
            h = ad.dropout(h, spec.dropout_rate, rng, training)
            h = ad.reshape(h, (n, self.factor * spec.conv_channels * self.d_in))
        if self.matrix:
            h = ad.reshape(h, (n, spec.out_dim, spec.out_dim))
        return h

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for local, t in self.params.items():
            yield f"{self.prefix}.{local}", t

    def buffers(self) -> dict[str, np.ndarray]:
        if self.bn is None:
            return {}
        return {f"{self.prefix}.bn.running_mean": self.bn.running_mean,
                f"{self.prefix}.bn.running_var": self.bn.running_var}

    def set_buffer(self, local: str, value: np.ndarray) -> None:
        setattr(self.bn, local.split(".")[-1], np.array(value, dtype=np.float64))


# --------------------------------------------------------------------------
# scoring algebra on already-decompressed representations


def object_query(scorer: str, es: Tensor, rel: Tensor) -> Tensor:
    """``q`` with ``score(s, r, o) = <q, e_o>``."""
    if scorer == "distmult":
        return ad.mul(es, rel)
    if scorer == "complex":
        d = es.shape[1] // 2
        sr, si = ad.columns(es, 0, d), ad.columns(es, d, 2 * d)
        rr, ri = ad.columns(rel, 0, d), ad.columns(rel, d, 2 * d)
        return ad.concat([ad.sub(ad.mul(sr, rr), ad.mul(si, ri)),
                          ad.add(ad.mul(sr, ri), ad.mul(si, rr))], axis=1)
    return ad.einsum("bi,bij->bj", es, rel)


def subject_query(scorer: str, rel: Tensor, eo: Tensor) -> Tensor:
    """``p`` with ``score(s, r, o) = <e_s, p>``."""
    if scorer == "distmult":
        return ad.mul(rel, eo)
    if scorer == "complex":
        d = eo.shape[1] // 2
        orr, oi = ad.columns(eo, 0, d), ad.columns(eo, d, 2 * d)
        rr, ri = ad.columns(rel, 0, d), ad.columns(rel, d, 2 * d)
        return ad.concat([ad.add(ad.mul(rr, orr), ad.mul(ri, oi)),
                          ad.sub(ad.mul(rr, oi), ad.mul(ri, orr))], axis=1)
    return ad.einsum("bij,bj->bi", rel, eo)


def triple_scores(scorer: str, es: Tensor, rel: Tensor, eo: Tensor) -> Tensor:
    if scorer == "distmult":
        # e_s * e_o first so that swapping subject and object is bit-exact
        return ad.sum(ad.mul(ad.mul(es, eo), rel), axis=1)
    return ad.sum(ad.mul(object_query(scorer, es, rel), eo), axis=1)


# --------------------------------------------------------------------------
# the model


class KGEModel:
    """Embedding tables plus decompression networks for one scorer.

    ``training`` flags select batch-norm batch statistics and active dropout;
    evaluation always runs with ``training=False``.
    """

    def __init__(self, config: ModelConfig, n_entities: int, n_base_relations: int):
        config.validate()
        self.config = config
        self.n_entities = n_entities
        self.n_base_relations = n_base_relations
        shapes = dict(parameter_shapes(config, n_entities, n_base_relations))
        rng = np.random.default_rng(config.seed)
        s = config.init_scale
        self.entity_table = Tensor(rng.uniform(-s, s, size=shapes["entity_table"]), requires_grad=True)
        self.relation_table = Tensor(rng.uniform(-s, s, size=shapes["relation_table"]), requires_grad=True)
        factor = config.complex_factor
        self.entity_decom = (Decompressor("entity_decom", config.entity_decom, config.d_e, factor, False, shapes, rng)
                             if config.entity_decom.enabled else None)
        self.relation_decom = (Decompressor("relation_decom", config.relation_decom, config.d_r, factor,
                                            config.scorer == "rescal", shapes, rng)
                               if config.relation_decom.enabled else None)
        self._shapes = shapes

    @classmethod
    def for_graph(cls, config: ModelConfig, graph) -> "KGEModel":
        return cls(config, graph.n_entities, graph.n_base_relations)

    @property
    def scorer(self) -> str:
        return self.config.scorer

    @property
    def n_relation_rows(self) -> int:
        return 2 * self.n_base_relations

    # -- registry --------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("entity_table", self.entity_table), ("relation_table", self.relation_table)]
        for decom in (self.entity_decom, self.relation_decom):
            if decom is not None:
                out.extend(decom.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for decom in (self.entity_decom, self.relation_decom):
            if decom is not None:
                out.update(decom.buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of all parameters then all buffers, in registry order."""
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = self.buffers()
        expected = list(params) + list(buffers)
        if sorted(state) != sorted(expected):
            raise DataError(f"state keys {sorted(state)} do not match model registry {sorted(expected)}")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise DataError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)
        for name in buffers:
            decom = self.entity_decom if name.startswith("entity_decom") else self.relation_decom
            decom.set_buffer(name, state[name])

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    # -- representations -------------------------------------------------

    def _check_entities(self, idx: np.ndarray) -> None:
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_entities):
            raise DataError(f"entity index out of range [0, {self.n_entities})")

    def _check_relations(self, idx: np.ndarray) -> None:
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_relation_rows):
            raise DataError(f"relation index out of range [0, {self.n_relation_rows})")

    def entity_repr(self, idx, training: bool = False, rng=None) -> Tensor:
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        self._check_entities(idx)
        rows = ad.take(self.entity_table, idx)
        if self.entity_decom is None:
            return rows
        out = self.entity_decom(rows, training, rng)
        if self.config.entity_decom.post_l2_normalize:
            out = ad.l2_normalize(out)
        return out

    def relation_repr(self, idx, training: bool = False, rng=None) -> Tensor:
        """Relation vectors, or (batch, D, D) matrices for RESCAL."""
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        self._check_relations(idx)
        rows = ad.take(self.relation_table, idx)
        if self.relation_decom is not None:
            return self.relation_decom(rows, training, rng)
        if self.scorer == "rescal":
            d = self.config.d_r
            return ad.reshape(rows, (len(idx), d, d))
        return rows

    # -- scoring ---------------------------------------------------------

    def score(self, s, r, o, training: bool = False, rng=None) -> Tensor:
        """Scores (pre-sigmoid logits) of a batch of triples.

        Subjects and objects pass through the entity network as one batch so
        that batch-norm statistics and dropout masks are shared.
        """
        s = np.asarray(s, dtype=np.int64).reshape(-1)
        o = np.asarray(o, dtype=np.int64).reshape(-1)
        n = len(s)
        ents = self.entity_repr(np.concatenate([s, o]), training, rng)
        rel = self.relation_repr(r, training, rng)
        return triple_scores(self.scorer, ad.rows(ents, 0, n), rel, ad.rows(ents, n, 2 * n))

    def score_triple(self, s: int, r: int, o: int, training: bool = False, rng=None) -> float:
        return float(self.score([s], [r], [o], training, rng).data[0])

    def all_entities(self, training: bool = False, rng=None) -> Tensor:
        return self.entity_repr(np.arange(self.n_entities), training, rng)

    def score_all_objects(self, s, r, training: bool = False, rng=None, entities: Tensor | None = None) -> Tensor:
        """(batch, n_entities) scores of ``(s, r, e)`` for every entity ``e``.

        Subject rows are read from the same decompressed entity matrix as the
        candidates. ``entities`` may pass a precomputed ``all_entities()``.
        """
        s = np.asarray(s, dtype=np.int64).reshape(-1)
        self._check_entities(s)
        ents = self.all_entities(training, rng) if entities is None else entities
        q = object_query(self.scorer, ad.take(ents, s), self.relation_repr(r, training, rng))
        return ad.matmul(q, ents, transpose_b=True)

    def score_all_subjects(self, r, o, training: bool = False, rng=None, entities: Tensor | None = None) -> Tensor:
        """(batch, n_entities) scores of ``(e, r, o)`` for every entity ``e``."""
        o = np.asarray(o, dtype=np.int64).reshape(-1)
        self._check_entities(o)
        ents = self.all_entities(training, rng) if entities is None else entities
        p = subject_query(self.scorer, self.relation_repr(r, training, rng), ad.take(ents, o))
        return ad.matmul(p, ents, transpose_b=True)


def init_model(config: ModelConfig, graph) -> KGEModel:
    return KGEModel.for_graph(config, graph)
