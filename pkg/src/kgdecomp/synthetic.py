"""Small generated knowledge graphs with known ground truth."""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .data import KnowledgeGraph, build_filter_index


def distmult_graph(n_entities: int = 50, n_relations: int = 4, dim: int = 10, n_true: int = 1000,
                   split=(0.8, 0.1, 0.1), seed: int = 0) -> KnowledgeGraph:
    """Keep the ``n_true`` highest-scoring triples of a random DistMult model.

    The kept triples are shuffled and split by the given fractions.
    """
    rng = np.random.default_rng(seed)
    ent = rng.normal(size=(n_entities, dim))
    rel = rng.normal(size=(n_relations, dim))
    scores = np.einsum("sk,rk,ok->sro", ent, rel, ent)
    flat = np.argsort(-scores, axis=None, kind="stable")[:n_true]
    triples = np.stack(np.unravel_index(flat, scores.shape), axis=1).astype(np.int64)
    triples = triples[rng.permutation(len(triples))]
    n_train = int(round(split[0] * len(triples)))
    n_valid = int(round(split[1] * len(triples)))
    return build_filter_index(None, triples[:n_train], triples[n_train:n_train + n_valid],
                              triples[n_train + n_valid:], n_entities=n_entities, n_relations=n_relations)


def sign_tensor(n_entities: int = 10, n_relations: int = 2, rank: int = 10, seed: int = 0) -> np.ndarray:
    """``sign(E R_j E^T)`` for random Gaussian factors; shape (entities, relations, entities)."""
    rng = np.random.default_rng(seed)
    ent = rng.normal(size=(n_entities, rank))
    rel = rng.normal(size=(n_relations, rank, rank))
    return np.sign(np.einsum("ia,jab,kb->ijk", ent, rel, ent))


def sign_tensor_graph(tensor: np.ndarray) -> KnowledgeGraph:
    """Complete graph whose train split holds every ``+1`` entry of ``tensor``."""
    n_ent, n_rel, _ = tensor.shape
    triples = np.argwhere(tensor > 0).astype(np.int64)
    return build_filter_index(None, triples, n_entities=n_ent, n_relations=n_rel)


def write_graph(graph: KnowledgeGraph, directory: str | Path) -> None:
    """Write the splits as ``train.txt``/``valid.txt``/``test.txt`` using the vocabulary names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        rows = graph.vocab.decode(graph.split(name))
        (directory / f"{name}.txt").write_text("".join("\t".join(t) + "\n" for t in rows), encoding="utf-8")


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="Write a synthetic DistMult-generated graph as triple files.")
    parser.add_argument("directory")
    parser.add_argument("--entities", type=int, default=50)
    parser.add_argument("--relations", type=int, default=4)
    parser.add_argument("--true-triples", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    graph = distmult_graph(args.entities, args.relations, n_true=args.true_triples, seed=args.seed)
    write_graph(graph, args.directory)
    print(f"wrote {len(graph.train)}/{len(graph.valid)}/{len(graph.test)} triples to {args.directory}")


if __name__ == "__main__":
    main()
