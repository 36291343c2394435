"""K-means with k-means++ seeding and Lloyd iterations."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..errors import ConfigError


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[i])
        d2 = np.minimum(d2, _sq_dists(X, X[i][None])[:, 0])
    return np.array(centers)


def lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int):
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        new = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = centers.copy()
        for j in range(centers.shape[0]):
            members = labels == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
            else:
                # refill an empty cluster with the worst-served point
                far = int(d2[np.arange(len(X)), labels].argmax())
                centers[j] = X[far]
    d2 = _sq_dists(X, centers)
    labels = d2.argmin(axis=1)
    wcss = float(((X - centers[labels]) ** 2).sum())
    return labels, centers, wcss


def kmeans(X, k: int = 5, restarts: int = 10, iters: int = 100, seed: int = 0):
    """Best of ``restarts`` runs by within-cluster sum of squares.

    Returns ``(labels, centers, wcss)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < k:
        raise ConfigError(f"k-means needs at least k={k} rows, got {X.shape[0]}")
    if k < 1 or restarts < 1 or iters < 1:
        raise ConfigError("k, restarts and iters must be positive")
    best = None
    for ss in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(ss)
        out = lloyd(X, kmeans_pp(X, k, rng), iters)
        if best is None or out[2] < best[2]:
            best = out
    return best


class KMeansClusterer(ClusterMixin, BaseEstimator):
    def __init__(self, n_clusters=5, restarts=10, max_iter=100, seed=0):
        self.n_clusters = n_clusters
        self.restarts = restarts
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.labels_, self.cluster_centers_, self.inertia_ = kmeans(
            X, self.n_clusters, self.restarts, self.max_iter, self.seed
        )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return _sq_dists(X, self.cluster_centers_).argmin(axis=1)
