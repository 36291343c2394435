"""Linear probe on frozen embeddings."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .. import checkpoint
from ..errors import ConfigError, ProtocolError
from .embeddings import EmbeddingSet

ZERO_SHOT_PROVENANCE = [("MID", "TRAIN")]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Softmax regression trained with Adam on mini-batches.

    Weights start at zero and the shuffle order comes from ``seed``, so a fit
    is a pure function of its inputs.
    """

    def __init__(self, lr=1e-4, batch_size=64, epochs=20, seed=0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.betas = betas
        self.eps = eps

    def fit(self, X, y, provenance=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("probe needs batch_size >= 1, epochs >= 0 and lr > 0")
        self.classes_, yi = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ConfigError("probe training set has a single class")
        n, d = X.shape
        c = self.classes_.size
        W = np.zeros((c, d))
        b = np.zeros(c)
        mw, vw, mb, vb = np.zeros_like(W), np.zeros_like(W), np.zeros_like(b), np.zeros_like(b)
        b1, b2 = self.betas
        rng = np.random.default_rng(self.seed)
        onehot = np.eye(c)[yi]
        t = 0
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for s in range(0, n, self.batch_size):
                idx = order[s : s + self.batch_size]
                xb, tb = X[idx], onehot[idx]
                logp = _log_softmax(xb @ W.T + b)
                total += float(-(tb * logp).sum())
                g = (np.exp(logp) - tb) / len(idx)
                gW, gb = g.T @ xb, g.sum(axis=0)
                t += 1
                for p, gr, m, v in ((W, gW, mw, vw), (b, gb, mb, vb)):
                    m *= b1
                    m += (1 - b1) * gr
                    v *= b2
                    v += (1 - b2) * gr * gr
                    p -= self.lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + self.eps)
            self.loss_curve_.append(total / n)
        self.coef_, self.intercept_ = W, b
        self.n_features_in_ = d
        self.provenance_ = sorted(tuple(p) for p in provenance) if provenance is not None else None
        self.train_accuracy_ = float(np.mean(self.predict(X) == y))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigError(f"probe expects {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        return np.exp(_log_softmax(self.decision_function(X)))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    # persistence -------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        check_is_fitted(self, "coef_")
        side = {
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()},
            "provenance": self.provenance_,
            "train_accuracy": self.train_accuracy_,
            "loss_curve": self.loss_curve_,
        }
        side.update(extra or {})
        tensors = {"weight": self.coef_, "bias": self.intercept_, "classes": self.classes_.astype(np.float64)}
        checkpoint.save(path, tensors, side)

    @classmethod
    def load(cls, path) -> "LinearProbe":
        tensors, side = checkpoint.load(path)
        params = side.get("params", {})
        if "betas" in params:
            params["betas"] = tuple(params["betas"])
        probe = cls(**params)
        probe.coef_ = tensors["weight"].astype(np.float64)
        probe.intercept_ = tensors["bias"].astype(np.float64)
        probe.classes_ = tensors["classes"].astype(np.int64)
        probe.n_features_in_ = probe.coef_.shape[1]
        prov = side.get("provenance")
        probe.provenance_ = None if prov is None else sorted(tuple(p) for p in prov)
        probe.train_accuracy_ = side.get("train_accuracy")
        probe.loss_curve_ = side.get("loss_curve", [])
        return probe


def train_probe(train: EmbeddingSet, **params) -> LinearProbe:
    """Fit a probe on TRAIN-split embeddings, tagging it with their provenance."""
    if any(r.split.value != "TRAIN" for r in train.meta):
        raise ProtocolError("probe training rows must all come from the TRAIN split")
    return LinearProbe(**params).fit(train.rows, train.labels, provenance=train.provenance)


def require_zero_shot(probe: LinearProbe) -> None:
    """Refuse a probe that has seen anything but MID-level TRAIN embeddings."""
    prov = getattr(probe, "provenance_", None)
    if prov != ZERO_SHOT_PROVENANCE:
        raise ProtocolError(f"zero-shot probe must be trained on MID/TRAIN embeddings only, provenance={prov}")
