"""scikit-learn style wrappers around the search loop and the discrete sub-network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import SyntheticDataset
from .estimators import parse_estimator
from .search import SearchConfig, TrainingConfig, bilevel_search, supernet_config, train_discrete
from .supernet import Genotype, discrete_logits, predict_logits

__all__ = ["SuperNetSearchClassifier", "GenotypeClassifier"]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _encode(X, y):
    X, y = check_X_y(X, y, dtype=np.float64)
    check_classification_targets(y)
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    return X, encoded.astype(np.int64), classes


class SuperNetSearchClassifier(ClassifierMixin, BaseEstimator):
    """Differentiable architecture search as an estimator.

    ``fit`` splits ``(X, y)`` in half (weights on the first half, architecture
    on the second), runs the alternating search and keeps the super-network.
    The discretized architecture is exposed as ``genotype_``.

    Parameters mirror :class:`~bilevelnas.search.SearchConfig`; ``estimator``
    is one of ``"first-order"``, ``"second-order"``, ``"amended"``,
    ``"exact"``, ``"brute-force"``.
    """

    def __init__(
        self,
        estimator="amended",
        eta=0.1,
        xi=None,
        epochs=50,
        inner_steps=1,
        alpha_lr=3e-4,
        alpha_optimizer="adam",
        omega_lr=0.1,
        num_cells=2,
        nodes_per_cell=2,
        feature_dim=4,
        operators=("none", "skip_connect", "linear", "nonlinear"),
        share_cell_params=True,
        prune_edges=True,
        two_stage=False,
        random_state=0,
    ):
        self.estimator = estimator
        self.eta = eta
        self.xi = xi
        self.epochs = epochs
        self.inner_steps = inner_steps
        self.alpha_lr = alpha_lr
        self.alpha_optimizer = alpha_optimizer
        self.omega_lr = omega_lr
        self.num_cells = num_cells
        self.nodes_per_cell = nodes_per_cell
        self.feature_dim = feature_dim
        self.operators = operators
        self.share_cell_params = share_cell_params
        self.prune_edges = prune_edges
        self.two_stage = two_stage
        self.random_state = random_state

    def _search_config(self, n_samples: int) -> SearchConfig:
        return SearchConfig(
            estimator=parse_estimator(self.estimator, eta=self.eta, xi=self.xi),
            epochs=self.epochs,
            inner_steps=self.inner_steps,
            alpha_lr=self.alpha_lr,
            alpha_optimizer=self.alpha_optimizer,
            seed=self.random_state,
            dataset_size=n_samples,
            operators=tuple(self.operators),
            share_cell_params=self.share_cell_params,
            two_stage=self.two_stage,
            training=TrainingConfig(
                num_cells=self.num_cells,
                nodes_per_cell=self.nodes_per_cell,
                feature_dim=self.feature_dim,
                omega_lr=self.omega_lr,
                prune_edges=self.prune_edges,
            ),
        )

    def fit(self, X, y):
        X, yk, self.classes_ = _encode(X, y)
        n = len(yk) - len(yk) % 4
        if n < 4:
            raise ValueError("need at least 4 samples")
        data = SyntheticDataset(X[:n], yk[:n], "user", int(self.random_state))
        result = bilevel_search(self._search_config(n), data)
        self.n_features_in_ = X.shape[1]
        self.network_ = result.network
        self.arch_ = result.arch
        self.omega_ = result.omega
        self.genotype_ = result.genotype
        self.trajectory_ = result.trajectory
        return self

    def decision_function(self, X):
        check_is_fitted(self, "omega_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict_logits(self.network_, self.arch_, self.omega_, X)

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class GenotypeClassifier(ClassifierMixin, BaseEstimator):
    """The discrete sub-network of a genotype, trained from scratch by full-batch GD."""

    def __init__(
        self,
        genotype=None,
        num_cells=2,
        nodes_per_cell=2,
        feature_dim=4,
        omega_lr=0.1,
        steps=300,
        share_cell_params=True,
        input_nodes=2,
        random_state=0,
    ):
        self.genotype = genotype
        self.num_cells = num_cells
        self.nodes_per_cell = nodes_per_cell
        self.feature_dim = feature_dim
        self.omega_lr = omega_lr
        self.steps = steps
        self.share_cell_params = share_cell_params
        self.input_nodes = input_nodes
        self.random_state = random_state

    def fit(self, X, y):
        if self.genotype is None:
            raise ValueError("genotype is required")
        genotype = self.genotype if isinstance(self.genotype, Genotype) else Genotype.from_dict(self.genotype)
        X, yk, self.classes_ = _encode(X, y)
        training = TrainingConfig(
            num_cells=self.num_cells,
            nodes_per_cell=self.nodes_per_cell,
            feature_dim=self.feature_dim,
            omega_lr=self.omega_lr,
            retrain_steps=self.steps,
        )
        config = SearchConfig(share_cell_params=self.share_cell_params, input_nodes=self.input_nodes, training=training)
        data = SyntheticDataset(X, yk, "user", int(self.random_state))
        self.network_ = supernet_config(config, data)
        self.genotype_ = genotype
        self.omega_, self.loss_curve_ = train_discrete(genotype, self.network_, training, self.random_state, X, yk)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "omega_")
        X = check_array(X, dtype=np.float64)
        return discrete_logits(self.genotype_, self.network_, self.omega_, X)

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
