"""scikit-learn compatible front end.

``X`` is always an integer array of shape (n_triples, 3) holding
``(subject, relation, object)`` indices::

    est = LinkPredictor(scorer="distmult", d_e=10, epochs=200, batch_size=100)
    est.fit(train_triples, valid_triples=valid_triples)
    est.decision_function(test_triples)     # raw scores
    est.score(test_triples)                 # filtered MRR
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import augment_reciprocals, build_filter_index
from .evaluation import EvalReport, evaluate
from .models import KGEModel, ModelConfig
from .training import TrainConfig, train


def check_triples(X, n_entities: int | None = None, n_relations: int | None = None) -> np.ndarray:
    X = check_array(X, dtype=None, ensure_min_samples=1)
    # float input is accepted only when every entry is a whole number
    if not np.issubdtype(X.dtype, np.integer):
        if not np.issubdtype(X.dtype, np.floating) or not np.all(np.mod(X, 1) == 0):
            raise ValueError("triple indices must be integers")
    X = X.astype(np.int64)
    if X.shape[1] != 3:
        raise ValueError(f"expected triples of shape (n, 3), got {X.shape}")
    if X.min() < 0:
        raise ValueError("triple indices must be non-negative")
    if n_entities is not None and X[:, [0, 2]].max() >= n_entities:
        raise ValueError(f"entity index >= n_entities ({n_entities})")
    if n_relations is not None and X[:, 1].max() >= n_relations:
        raise ValueError(f"relation index >= n_relations ({n_relations})")
    return X


class LinkPredictor(BaseEstimator):
    """Bilinear link predictor with optional decompression layers.

    Training-regime fields left as ``None`` take the per-scorer defaults of
    :meth:`TrainConfig.scorer_defaults`.
    """

    def __init__(self, scorer="distmult", d_e=100, d_r=None, entity_decom=None, relation_decom=None,
                 init_scale=0.1, regime=None, optimizer=None, learning_rate=None, margin=1.0, epochs=500,
                 batch_size=None, negatives_per_positive=1, label_smoothing=0.0, constrain_entity_norm=None,
                 eval_every=10, n_entities=None, n_relations=None, random_state=0):
        self.scorer = scorer
        self.d_e = d_e
        self.d_r = d_r
        self.entity_decom = entity_decom
        self.relation_decom = relation_decom
        self.init_scale = init_scale
        self.regime = regime
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.margin = margin
        self.epochs = epochs
        self.batch_size = batch_size
        self.negatives_per_positive = negatives_per_positive
        self.label_smoothing = label_smoothing
        self.constrain_entity_norm = constrain_entity_norm
        self.eval_every = eval_every
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.random_state = random_state

    def _configs(self) -> tuple[ModelConfig, TrainConfig]:
        seed = int(self.random_state or 0)
        model_cfg = ModelConfig(self.scorer, self.d_e, self.d_r, dict(self.entity_decom or {}),
                                dict(self.relation_decom or {}), self.init_scale, seed)
        overrides = {k: v for k, v in dict(
            regime=self.regime, optimizer=self.optimizer, learning_rate=self.learning_rate,
            batch_size=self.batch_size, constrain_entity_norm=self.constrain_entity_norm).items() if v is not None}
        train_cfg = TrainConfig.scorer_defaults(
            self.scorer, margin=self.margin, epochs=self.epochs, negatives_per_positive=self.negatives_per_positive,
            label_smoothing=self.label_smoothing, eval_every=self.eval_every, seed=seed,
            post_decom_normalize=model_cfg.entity_decom.post_l2_normalize, **overrides)
        return model_cfg, train_cfg

    def fit(self, X, y=None, valid_triples=None, test_triples=None):
        """Train on ``X``; with ``valid_triples`` the best-validation state is kept."""
        X = check_triples(X)
        parts = [X] + [check_triples(t) for t in (valid_triples, test_triples) if t is not None and len(t)]
        stacked = np.concatenate(parts)
        n_ent = self.n_entities or int(stacked[:, [0, 2]].max()) + 1
        n_rel = self.n_relations or int(stacked[:, 1].max()) + 1
        valid = check_triples(valid_triples) if valid_triples is not None and len(valid_triples) else np.empty((0, 3))
        test = check_triples(test_triples) if test_triples is not None and len(test_triples) else np.empty((0, 3))
        graph = build_filter_index(None, X, valid, test, n_entities=n_ent, n_relations=n_rel)
        model_cfg, train_cfg = self._configs()
        train_graph = augment_reciprocals(graph) if train_cfg.regime == "one-N" else graph
        model = KGEModel(model_cfg, n_ent, n_rel)
        eval_fn = None if len(valid) else (lambda m: 0.0)
        result = train(model, train_graph, train_cfg, evaluate_fn=eval_fn)
        if len(valid):
            model.load_state_dict(result.best_state)
        self.model_ = model
        self.graph_ = graph
        self.history_ = result.stats
        self.best_epoch_ = result.best_epoch
        self.n_entities_ = n_ent
        self.n_relations_ = n_rel
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_triples(X, self.n_entities_, self.n_relations_)
        return self.model_.score(X[:, 0], X[:, 1], X[:, 2]).data.copy()

    def predict_proba(self, X) -> np.ndarray:
        """Sigmoid of the scores, as (n, 2) columns for false/true."""
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(np.int64)

    def evaluate(self, X, workers: int = 1) -> EvalReport:
        """Filtered ranking metrics; ``X`` triples are added to the filter if unseen."""
        check_is_fitted(self, "model_")
        X = check_triples(X, self.n_entities_, self.n_relations_)
        graph = self.graph_
        known = {tuple(t) for t in graph.all_triples().tolist()}
        extra = np.array([t for t in X.tolist() if tuple(t) not in known], dtype=np.int64).reshape(-1, 3)
        if len(extra):
            graph = build_filter_index(graph.vocab, graph.train, graph.valid, np.concatenate([graph.test, extra]))
        return evaluate(self.model_, X, graph, workers=workers)

    def score(self, X, y=None) -> float:
        """Filtered MRR over both prediction directions."""
        return self.evaluate(X).mrr

    def __sklearn_is_fitted__(self):
        return hasattr(self, "model_")


__all__ = ["LinkPredictor", "check_triples"]
