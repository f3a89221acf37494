"""Bilinear knowledge-graph link predictors with embedding decompression layers."""

from .data import (
    KnowledgeGraph,
    RawTriple,
    Triple,
    Vocabulary,
    augment_reciprocals,
    build_filter_index,
    build_vocab,
    load_dataset,
    parse_triples,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .estimator import LinkPredictor
from .evaluation import EvalReport, brute_force_rank_oracle, evaluate, filtered_rank
from .models import DeComSpec, KGEModel, ModelConfig, count_parameters, init_model
from .training import TrainConfig, train, train_epoch

__version__ = "0.1.0"

__all__ = [
    "DeComSpec",
    "EvalReport",
    "KGEModel",
    "KnowledgeGraph",
    "LinkPredictor",
    "ModelConfig",
    "RawTriple",
    "TrainConfig",
    "Triple",
    "Vocabulary",
    "augment_reciprocals",
    "brute_force_rank_oracle",
    "build_filter_index",
    "build_vocab",
    "count_parameters",
    "evaluate",
    "filtered_rank",
    "init_model",
    "load_checkpoint",
    "load_dataset",
    "parse_triples",
    "save_checkpoint",
    "train",
    "train_epoch",
]
