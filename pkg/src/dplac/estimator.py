"""scikit-learn estimator facade over the federated simulator.

DPFederatedClassifier partitions the training data across simulated
clients, runs the differentially private federated loop, and then serves
predictions from the aggregated model. All constructor arguments are plain
hyperparameters, so get_params/set_params/clone work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import accountant, clipstrat, flcore, harness


class DPFederatedClassifier(BaseEstimator, ClassifierMixin):
    """Classifier trained by differentially private federated averaging.

    Parameters mirror the experiment configuration: (epsilon, delta) is the
    privacy budget, q the per-round client sampling rate, rounds the number
    of communication rounds (the first one initializes the clipping
    threshold unless initial_C is given), and strategy one of "fixed",
    "dp_lac", "dp_clac". A validation_fraction of the data is held out for
    the loss signal that drives threshold decay.

    Attributes set by fit: classes_, n_features_in_, model_, result_
    (the full round-by-round log), z_, and C0_.
    """

    def __init__(
        self,
        epsilon: float = 4.0,
        delta: float = 1e-5,
        q: float = 0.2,
        rounds: int = 20,
        num_clients: int = 50,
        strategy: str = "dp_lac",
        initial_C: float | None = None,
        fraction_train: float = 2.0 / 3.0,
        epochs: int = 1,
        batch_size: int = 32,
        lr: float = 0.1,
        alpha: float = 1.0,
        model_kind: str = "logistic",
        hidden: int = 16,
        validation_fraction: float = 0.2,
        random_state: int = 0,
        workers: int = 1,
    ):
        self.epsilon = epsilon
        self.delta = delta
        self.q = q
        self.rounds = rounds
        self.num_clients = num_clients
        self.strategy = strategy
        self.initial_C = initial_C
        self.fraction_train = fraction_train
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.alpha = alpha
        self.model_kind = model_kind
        self.hidden = hidden
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.workers = workers

    def fit(self, X, y) -> "DPFederatedClassifier":
        X, y = check_X_y(X, y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        self.n_features_in_ = X.shape[1]
        n = X.shape[0]
        n_val = max(1, int(round(n * self.validation_fraction)))
        if n - n_val < self.num_clients:
            raise ValueError(
                f"{n - n_val} training samples cannot cover {self.num_clients} clients"
            )
        perm = np.random.default_rng(self.random_state).permutation(n)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        k = int(self.classes_.size)
        train = flcore.Dataset(X[train_idx], encoded[train_idx].astype(np.int64), k)
        val = flcore.Dataset(X[val_idx], encoded[val_idx].astype(np.int64), k)
        cfg = harness.ExperimentConfig(
            privacy=accountant.PrivacySpec(
                epsilon=self.epsilon, delta=self.delta, q=self.q, rounds=self.rounds
            ),
            local=flcore.LocalConfig(
                epochs=self.epochs, batch_size=self.batch_size, lr=self.lr
            ),
            strategy=clipstrat.StrategyKind(
                kind=self.strategy, fraction_train=self.fraction_train
            ),
            num_clients=self.num_clients,
            data=harness.DataSpec(),  # ignored: datasets passed directly
            partition=flcore.PartitionSpec(
                num_clients=self.num_clients, alpha=self.alpha, seed=self.random_state
            ),
            model_kind=self.model_kind,
            hidden=self.hidden,
            initial_C=self.initial_C,
            master_seed=self.random_state,
        )
        result = harness.run_experiment(cfg, self.workers, data_override=(train, val))
        self.model_ = result.model
        self.result_ = result
        self.z_ = result.z
        self.C0_ = result.init_report.C0
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features; expected {self.n_features_in_}"
            )
        return flcore.logits(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        scores = np.clip(scores, -flcore.LOGIT_CLAMP, flcore.LOGIT_CLAMP)
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
