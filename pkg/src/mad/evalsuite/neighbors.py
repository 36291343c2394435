"""Cosine k-nearest-neighbour classification."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..errors import ConfigError


def l2_normalize(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norm = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norm > 0, norm, 1.0)


def _vote(neigh_labels: np.ndarray) -> object:
    """Majority label; a tie goes to the tied class seen first in
    similarity order, i.e. the nearest neighbour among the tied classes."""
    vals, counts = np.unique(neigh_labels, return_counts=True)
    winners = set(vals[counts == counts.max()].tolist())
    for lab in neigh_labels:
        if lab in winners:
            return lab
    raise AssertionError("unreachable")


def knn_classify(train_X, train_y, query_X, k: int = 20) -> np.ndarray:
    train_X = np.asarray(train_X, dtype=np.float64)
    train_y = np.asarray(train_y)
    if train_X.shape[0] == 0:
        raise ConfigError("k-NN needs a non-empty training set")
    if not 1 <= k <= train_X.shape[0]:
        raise ConfigError(f"k={k} must lie in [1, {train_X.shape[0]}]")
    # rounding lets mathematically equal similarities tie despite float noise
    sims = np.round(l2_normalize(query_X) @ l2_normalize(train_X).T, 12)
    # stable sort on -sim: equal similarities keep training-row order
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return np.array([_vote(train_y[row]) for row in order])


class KNNClassifier(ClassifierMixin, BaseEstimator):
    def __init__(self, n_neighbors=20):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.X_, self.y_ = X, y
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "X_")
        X = check_array(X, dtype=np.float64)
        return knn_classify(self.X_, self.y_, X, self.n_neighbors)
