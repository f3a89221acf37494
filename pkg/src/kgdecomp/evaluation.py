"""Filtered link-prediction metrics.

For a test triple ``(s, r, o)`` the object-side query ranks ``o`` among all
entities ``e`` after removing every ``e != o`` such that ``(s, r, e)`` is a
known true triple in any split; the subject side is symmetric. Ties use the
mean of the optimistic and pessimistic rank::

    rank = 1 + #{strictly higher} + #{equal, other than the gold} / 2

Both directions are pooled into one metric set; per-direction metrics are
kept alongside.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import KnowledgeGraph, Triple
from .errors import DataError
from .models import KGEModel

DIRECTIONS = ("object", "subject")
HITS_AT = (1, 3, 10)


@dataclass(frozen=True)
class RankRecord:
    triple: Triple
    direction: str
    filtered_rank: float


@dataclass
class DirectionReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    query_count: int


@dataclass
class EvalReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    query_count: int
    triples_per_second: float = 0.0
    per_direction: dict[str, DirectionReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        data = dict(data)
        data["per_direction"] = {k: DirectionReport(**v) for k, v in data.get("per_direction", {}).items()}
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _metrics(ranks: list[float]) -> tuple[float, float, float, float]:
    n = len(ranks)
    mrr = math.fsum(1.0 / r for r in ranks) / n
    hits = [sum(1 for r in ranks if r <= k) / n for k in HITS_AT]
    return (mrr, *hits)


def report_from_ranks(records: list[RankRecord], triples_per_second: float = 0.0) -> EvalReport:
    if not records:
        raise DataError("cannot build a report from zero queries")
    per = {}
    for d in DIRECTIONS:
        ranks = [rec.filtered_rank for rec in records if rec.direction == d]
        if ranks:
            per[d] = DirectionReport(*_metrics(ranks), query_count=len(ranks))
    mrr, h1, h3, h10 = _metrics([rec.filtered_rank for rec in records])
    return EvalReport(mrr, h1, h3, h10, len(records), triples_per_second, per)


def _tie_rank(scores: np.ndarray, gold: int, known: frozenset, filtered: bool) -> float:
    gold_score = scores[gold]
    keep = np.ones(scores.shape[0], dtype=bool)
    if filtered and known:
        keep[np.fromiter(known, dtype=np.int64, count=len(known))] = False
    keep[gold] = False
    cand = scores[keep]
    higher = np.count_nonzero(cand > gold_score)
    equal = np.count_nonzero(cand == gold_score)
    return 1.0 + higher + equal / 2.0


def _check_triples(model: KGEModel, triples: np.ndarray) -> np.ndarray:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if triples.size and (triples.min() < 0 or triples[:, [0, 2]].max() >= model.n_entities
                         or triples[:, 1].max() >= model.n_relation_rows):
        raise DataError("triple indices outside the model's vocabulary ranges")
    return triples


def rank_triples(model: KGEModel, triples: np.ndarray, graph: KnowledgeGraph, direction: str,
                 filtered: bool = True, batch_size: int = 256, entities=None) -> list[RankRecord]:
    """Filtered ranks for one direction, scoring ``batch_size`` queries at a time."""
    if direction not in DIRECTIONS:
        raise DataError(f"direction must be one of {DIRECTIONS}")
    triples = _check_triples(model, triples)
    ents = model.all_entities() if entities is None else entities
    out = []
    for start in range(0, len(triples), batch_size):
        chunk = triples[start:start + batch_size]
        if direction == "object":
            scores = model.score_all_objects(chunk[:, 0], chunk[:, 1], entities=ents).data
        else:
            scores = model.score_all_subjects(chunk[:, 1], chunk[:, 2], entities=ents).data
        for row, (s, r, o) in zip(scores, chunk):
            if direction == "object":
                gold, known = int(o), graph.sr_to_o.get((int(s), int(r)), frozenset())
            else:
                gold, known = int(s), graph.or_to_s.get((int(o), int(r)), frozenset())
            out.append(RankRecord(Triple(int(s), int(r), int(o)), direction, _tie_rank(row, gold, known, filtered)))
    return out


def filtered_rank(model: KGEModel, triple, graph: KnowledgeGraph, direction: str = "object",
                  filtered: bool = True) -> RankRecord:
    return rank_triples(model, np.asarray([triple]), graph, direction, filtered)[0]


def evaluate(model: KGEModel, triples, graph: KnowledgeGraph, workers: int = 1,
             batch_size: int = 256) -> EvalReport:
    """Pooled filtered MRR and Hits@{1,3,10} over both directions.

    With ``workers > 1`` disjoint shards are ranked on a thread pool; the
    metrics are order independent, so the report does not change.
    """
    triples = _check_triples(model, triples)
    if len(triples) == 0:
        raise DataError("cannot evaluate an empty triple list")
    start = time.perf_counter()
    ents = model.all_entities()
    jobs = [(shard, d) for shard in np.array_split(triples, max(1, min(workers, len(triples)))) for d in DIRECTIONS]

    def run(job):
        shard, d = job
        return rank_triples(model, shard, graph, d, batch_size=batch_size, entities=ents)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(job) for job in jobs]
    records = [rec for part in parts for rec in part]
    elapsed = time.perf_counter() - start
    return report_from_ranks(records, len(triples) / elapsed if elapsed > 0 else float("inf"))


def brute_force_rank_oracle(model: KGEModel, triple, graph: KnowledgeGraph, direction: str = "object",
                            filtered: bool = True) -> float:
    """Reference rank: one scoring call per candidate, set filtering, then a sort."""
    s, r, o = (int(x) for x in triple)
    scored = []
    for e in range(model.n_entities):
        cand = (s, r, e) if direction == "object" else (e, r, o)
        is_gold = cand == (s, r, o)
        if filtered and not is_gold and cand in _true_triples(graph):
            continue
        scored.append((model.score_triple(*cand), is_gold))
    scored.sort(key=lambda item: -item[0])
    gold_score = next(score for score, is_gold in scored if is_gold)
    positions = [i + 1 for i, (score, _) in enumerate(scored) if score == gold_score]
    return (positions[0] + positions[-1]) / 2.0


_TRUE_CACHE: dict[int, tuple[KnowledgeGraph, set]] = {}


def _true_triples(graph: KnowledgeGraph) -> set:
    cached = _TRUE_CACHE.get(id(graph))
    if cached is None or cached[0] is not graph:
        cached = (graph, {tuple(int(x) for x in t) for t in graph.all_triples()})
        _TRUE_CACHE.clear()
        _TRUE_CACHE[id(graph)] = cached
    return cached[1]


def bench_throughput(model: KGEModel, triples, graph: KnowledgeGraph, repetitions: int = 3,
                     workers: int = 1) -> float:
    """Median triples/second of full filtered evaluation, after one warm-up pass."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    evaluate(model, triples, graph, workers=workers)
    rates = []
    for _ in range(max(1, repetitions)):
        start = time.perf_counter()
        evaluate(model, triples, graph, workers=workers)
        rates.append(len(triples) / (time.perf_counter() - start))
    return float(statistics.median(rates))
