"""Scikit-learn estimator facade over the federated training protocols.

``SplitFedClassifier`` runs a full federated simulation inside ``fit``:
the training set is partitioned across simulated clients and the chosen
protocol trains a small MLP for the configured number of rounds. The
fitted global model then serves ordinary ``predict``/``predict_proba``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, partition_dirichlet, partition_iid
from .models import build_mlp, engine_cut
from .protocols import RoundConfig, evaluate, init_protocol, run_round


class SplitFedClassifier(ClassifierMixin, BaseEstimator):
    """Federated / split-federated MLP classifier.

    Parameters
    ----------
    variant : one of "fedavg", "sl", "sflv1", "sflv2", "centralized".
    cut_layer : block boundary index the model is split at (split variants).
    n_clients : number of simulated clients the data is partitioned over.
    rounds, local_epochs, batch_size : communication-round geometry.
    optimizer, learning_rate : "sgd" or "adam"; a float or a per-round list.
    partition : "iid" or "dirichlet"; the latter uses ``dirichlet_mu`` and
        resamples until every client holds ``min_client_samples`` samples
        (defaults to one batch).
    hidden_layer_sizes : widths of the hidden blocks.
    random_state : master seed; fully determines the fit.
    """

    def __init__(self, variant="sflv2", cut_layer=1, n_clients=4, rounds=20,
                 local_epochs=1, batch_size=32, optimizer="adam",
                 learning_rate=0.001, partition="iid", dirichlet_mu=0.1,
                 min_client_samples=None, hidden_layer_sizes=(32, 32, 32),
                 permute_per_round=False, random_state=0):
        self.variant = variant
        self.cut_layer = cut_layer
        self.n_clients = n_clients
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.partition = partition
        self.dirichlet_mu = dirichlet_mu
        self.min_client_samples = min_client_samples
        self.hidden_layer_sizes = hidden_layer_sizes
        self.permute_per_round = permute_per_round
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("needs at least 2 classes")
        self.n_features_in_ = X.shape[1]

        ds = Dataset(X, y_idx, len(self.classes_))
        if self.partition == "iid":
            part = partition_iid(ds, self.n_clients, seed=self.random_state)
        elif self.partition == "dirichlet":
            min_samples = (self.min_client_samples
                           if self.min_client_samples is not None else self.batch_size)
            part = partition_dirichlet(ds, self.n_clients, self.dirichlet_mu,
                                       seed=self.random_state, min_samples=min_samples)
        else:
            raise ValueError(f"unknown partition scheme {self.partition!r}")

        model, boundaries = build_mlp((self.n_features_in_,),
                                      tuple(self.hidden_layer_sizes),
                                      len(self.classes_))
        model.init_params(self.random_state)
        cut = (engine_cut(boundaries, self.cut_layer)
               if self.variant in ("sl", "sflv1", "sflv2") else None)

        lr = self.learning_rate
        state = init_protocol(model, self.variant, cut, self.n_clients,
                              self.optimizer,
                              lr[0] if isinstance(lr, (list, tuple)) else lr)
        cfg = RoundConfig(
            epochs=self.local_epochs, batch_size=self.batch_size,
            master_seed=self.random_state,
            lr_schedule=list(lr) if isinstance(lr, (list, tuple)) else lr,
            permute_per_round=self.permute_per_round)

        self.loss_curve_ = []
        for t in range(self.rounds):
            self.loss_curve_.append(run_round(state, ds, part, cfg, t))
        self.model_ = state.global_model()
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.forward(X)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def score_dataset(self, X, y):
        """(loss, accuracy) on encoded labels, matching the harness metric."""
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        y_idx = np.searchsorted(self.classes_, y)
        return evaluate(self.model_, Dataset(X, y_idx, len(self.classes_)))
