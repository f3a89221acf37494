"""Triple files, vocabularies and filter indexes.

Benchmark archives (FB15k-237, WN18RR) ship as ``train.txt``, ``valid.txt`` and
``test.txt`` with one ``subject<TAB>relation<TAB>object`` fact per line.

Index layout used by the models: entities occupy ``[0, n_entities)``, and the
embedding table carries two reserved rows after them. Relations occupy
``[0, n_base_relations)``; reciprocal relations, when added, occupy
``[n_base_relations, 2 * n_base_relations)``. The relation table always has
``2 * n_base_relations + 2`` rows.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class RawTriple(NamedTuple):
    subject: str
    relation: str
    object: str


class Triple(NamedTuple):
    s: int
    r: int
    o: int


def parse_triples(path: str | Path) -> list[RawTriple]:
    """Read a tab-separated triple file, preserving file order.

    Blank lines are skipped. Any other line must have exactly three non-empty
    fields, otherwise ``DataError`` names the offending line.
    """
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            fields = [f.strip() for f in fields]
            if not all(fields):
                raise DataError(f"{path}:{lineno}: empty field")
            triples.append(RawTriple(*fields))
    return triples


@dataclass(frozen=True)
class Vocabulary:
    entity_names: tuple[str, ...]
    relation_names: tuple[str, ...]
    entity_index: Mapping[str, int] = field(repr=False, compare=False, default=None)
    relation_index: Mapping[str, int] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        ent = {name: i for i, name in enumerate(self.entity_names)}
        rel = {name: i for i, name in enumerate(self.relation_names)}
        if len(ent) != len(self.entity_names) or len(rel) != len(self.relation_names):
            raise DataError("vocabulary names must be unique")
        object.__setattr__(self, "entity_index", ent)
        object.__setattr__(self, "relation_index", rel)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def encode(self, triples: Iterable[RawTriple]) -> np.ndarray:
        rows = []
        for t in triples:
            try:
                rows.append((self.entity_index[t.subject], self.relation_index[t.relation],
                             self.entity_index[t.object]))
            except KeyError as exc:
                raise DataError(f"name not in vocabulary: {exc.args[0]!r}") from None
        return np.array(rows, dtype=np.int64).reshape(-1, 3)

    def decode(self, triples: np.ndarray) -> list[RawTriple]:
        n_rel = self.n_relations
        out = []
        for s, r, o in np.asarray(triples).reshape(-1, 3):
            if r >= n_rel:
                raise DataError(f"relation index {r} has no name (reciprocal relation?)")
            out.append(RawTriple(self.entity_names[s], self.relation_names[r], self.entity_names[o]))
        return out

    def save(self, directory: str | Path) -> None:
        """Write ``entities.txt`` and ``relations.txt``; line number is the index."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "entities.txt").write_text("".join(n + "\n" for n in self.entity_names), encoding="utf-8")
        (directory / "relations.txt").write_text("".join(n + "\n" for n in self.relation_names), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "Vocabulary":
        directory = Path(directory)
        ents = (directory / "entities.txt").read_text(encoding="utf-8").splitlines()
        rels = (directory / "relations.txt").read_text(encoding="utf-8").splitlines()
        return cls(tuple(ents), tuple(rels))


def build_vocab(*splits: Sequence[RawTriple]) -> Vocabulary:
    """Union of names over all splits, in first-occurrence order."""
    entities: dict[str, None] = {}
    relations: dict[str, None] = {}
    for split in splits:
        for t in split:
            entities.setdefault(t.subject)
            relations.setdefault(t.relation)
            entities.setdefault(t.object)
    return Vocabulary(tuple(entities), tuple(relations))


def _index(triples: np.ndarray, key_cols: tuple[int, int], value_col: int) -> dict[tuple[int, int], frozenset]:
    groups: dict[tuple[int, int], set] = defaultdict(set)
    for row in triples:
        groups[(int(row[key_cols[0]]), int(row[key_cols[1]]))].add(int(row[value_col]))
    return {k: frozenset(v) for k, v in groups.items()}


@dataclass(frozen=True)
class KnowledgeGraph:
    """Encoded splits plus filter indexes over train, valid and test.

    ``sr_to_o[(s, r)]`` is the set of every ``o`` such that ``(s, r, o)`` is in
    any split; ``or_to_s[(o, r)]`` likewise for subjects. Instances are
    immutable and safe to share between threads.
    """

    vocab: Vocabulary
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    sr_to_o: Mapping[tuple[int, int], frozenset] = field(repr=False)
    or_to_s: Mapping[tuple[int, int], frozenset] = field(repr=False)
    n_entities: int
    n_base_relations: int
    reciprocal_augmented: bool = False

    @property
    def n_relations(self) -> int:
        """Relations currently in scope (doubled after augmentation)."""
        return self.n_base_relations * (2 if self.reciprocal_augmented else 1)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    def base_triples(self, name: str) -> np.ndarray:
        """Split rows that use original (non-reciprocal) relations."""
        triples = self.split(name)
        return triples[triples[:, 1] < self.n_base_relations]

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def statistics(self) -> dict:
        return {
            "entities": self.n_entities,
            "relations": self.n_base_relations,
            "train": int(len(self.train)),
            "valid": int(len(self.valid)),
            "test": int(len(self.test)),
            "reciprocal_augmented": self.reciprocal_augmented,
        }


def _as_triples(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"triples must have shape (n, 3), got {arr.shape}")
    return arr


def build_filter_index(
    vocab: Vocabulary | None,
    train,
    valid=(),
    test=(),
    *,
    n_entities: int | None = None,
    n_relations: int | None = None,
    reciprocal_augmented: bool = False,
) -> KnowledgeGraph:
    """Assemble a :class:`KnowledgeGraph` from encoded splits.

    Without a vocabulary, ``n_entities`` and ``n_relations`` must be given and
    synthetic names ``e<i>`` / ``r<i>`` are generated.
    """
    if vocab is None:
        if n_entities is None or n_relations is None:
            raise DataError("n_entities and n_relations are required without a vocabulary")
        vocab = Vocabulary(tuple(f"e{i}" for i in range(n_entities)),
                           tuple(f"r{i}" for i in range(n_relations)))
    splits = [_as_triples(t) for t in (train, valid, test)]
    n_ent = vocab.n_entities
    n_rel = vocab.n_relations * (2 if reciprocal_augmented else 1)
    for name, arr in zip(SPLITS, splits):
        if arr.size and (arr.min() < 0 or arr[:, [0, 2]].max() >= n_ent or arr[:, 1].max() >= n_rel):
            raise DataError(f"{name} split has indices outside the vocabulary ranges")
    everything = np.concatenate(splits)
    return KnowledgeGraph(
        vocab=vocab,
        train=splits[0],
        valid=splits[1],
        test=splits[2],
        sr_to_o=_index(everything, (0, 1), 2),
        or_to_s=_index(everything, (2, 1), 0),
        n_entities=n_ent,
        n_base_relations=vocab.n_relations,
        reciprocal_augmented=reciprocal_augmented,
    )


def augment_reciprocals(graph: KnowledgeGraph) -> KnowledgeGraph:
    """Add ``(o, r + |R|, s)`` for every ``(s, r, o)`` in each split."""
    if graph.reciprocal_augmented:
        raise DataError("graph already has reciprocal relations")
    n_rel = graph.n_base_relations

    def flip(t: np.ndarray) -> np.ndarray:
        rev = np.stack([t[:, 2], t[:, 1] + n_rel, t[:, 0]], axis=1)
        return np.concatenate([t, rev])

    return build_filter_index(graph.vocab, flip(graph.train), flip(graph.valid), flip(graph.test),
                              reciprocal_augmented=True)


def load_dataset(train: str | Path, valid: str | Path, test: str | Path) -> KnowledgeGraph:
    raw = [parse_triples(p) for p in (train, valid, test)]
    vocab = build_vocab(*raw)
    graph = build_filter_index(vocab, *(vocab.encode(r) for r in raw))
    logger.info("loaded %d entities, %d relations", graph.n_entities, graph.n_base_relations)
    return graph


def load_dataset_dir(directory: str | Path) -> KnowledgeGraph:
    directory = Path(directory)
    return load_dataset(*(directory / f"{name}.txt" for name in SPLITS))

