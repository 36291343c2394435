"""Clustering, classification and segmentation scores."""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from ..errors import ConfigError

DENOM_EPS = 1e-12


def _encode(labels) -> np.ndarray:
    return np.unique(np.asarray(labels), return_inverse=True)[1].reshape(-1)


def contingency(u, v) -> np.ndarray:
    a, b = _encode(u), _encode(v)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def label_entropy(labels) -> float:
    counts = np.bincount(_encode(labels)).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_info(u, v) -> float:
    table = contingency(u, v).astype(np.float64)
    n = table.sum()
    a = table.sum(axis=1, keepdims=True)
    b = table.sum(axis=0, keepdims=True)
    nz = table > 0
    return float((table[nz] / n * np.log(n * table[nz] / (a @ b)[nz])).sum())


def expected_mutual_info(table: np.ndarray) -> float:
    """E[MI] under the hypergeometric (fixed marginals) permutation model."""
    a = table.sum(axis=1).astype(np.int64)
    b = table.sum(axis=0).astype(np.int64)
    n = int(a.sum())
    lg = lambda x: gammaln(np.asarray(x, dtype=np.float64) + 1.0)
    emi = 0.0
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            log_p = (
                lg(ai) + lg(bj) + lg(n - ai) + lg(n - bj)
                - lg(n) - lg(nij) - lg(ai - nij) - lg(bj - nij) - lg(n - ai - bj + nij)
            )
            term = nij / n * (np.log(n) + np.log(nij) - np.log(ai) - np.log(bj))
            emi += float((term * np.exp(log_p)).sum())
    return emi


def ami(labels_u, labels_v) -> float:
    """Adjusted mutual information with arithmetic-mean normalisation.

    When the chance-corrected denominator vanishes the score is 1 for two
    identical partitions and 0 otherwise.
    """
    u, v = np.asarray(labels_u).reshape(-1), np.asarray(labels_v).reshape(-1)
    if u.shape != v.shape:
        raise ConfigError(f"label length mismatch: {u.size} vs {v.size}")
    if u.size < 2:
        raise ConfigError("AMI needs at least two samples")
    table = contingency(u, v)
    mi = mutual_info(u, v)
    emi = expected_mutual_info(table)
    denom = 0.5 * (label_entropy(u) + label_entropy(v)) - emi
    if abs(denom) <= DENOM_EPS:
        same = table.shape[0] == table.shape[1] and np.count_nonzero(table) == table.shape[0]
        return 1.0 if same else 0.0
    return float((mi - emi) / denom)


def dbi(X, labels) -> float:
    """Davies-Bouldin index; singletons have zero scatter."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if X.shape[0] != labels.size:
        raise ConfigError("X and labels disagree in length")
    ids = np.unique(labels)
    if ids.size < 2:
        raise ConfigError("DBI needs at least two non-empty clusters")
    cents = np.stack([X[labels == c].mean(axis=0) for c in ids])
    scatter = np.array([np.linalg.norm(X[labels == c] - cents[i], axis=1).mean() for i, c in enumerate(ids)])
    gaps = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
    np.fill_diagonal(gaps, np.inf)
    if np.any(gaps <= 0.0):
        raise ConfigError("degenerate centroids: two clusters share a centroid")
    ratio = (scatter[:, None] + scatter[None]) / gaps
    return float(ratio.max(axis=1).mean())


def f1_table(pred, gt, classes=None) -> dict[int, float]:
    """Per-class F1 (0 when precision + recall is 0). Classes absent from
    both ``pred`` and ``gt`` are left out."""
    pred, gt = np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ConfigError("pred and gt disagree in length")
    if classes is None:
        classes = np.union1d(pred, gt)
    out = {}
    for c in classes:
        tp = int(np.sum((pred == c) & (gt == c)))
        fp = int(np.sum((pred == c) & (gt != c)))
        fn = int(np.sum((pred != c) & (gt == c)))
        if tp + fp + fn == 0:
            continue
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        out[int(c)] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return out


def macro_f1(pred, gt, classes=None) -> tuple[float, dict[int, float]]:
    table = f1_table(pred, gt, classes)
    if not table:
        raise ConfigError("no classes to score")
    return float(np.mean(list(table.values()))), table


def seg_scores(pred, gt) -> dict:
    """IoU / Dice per class over grid cells, means over classes present in
    ``gt``, and cell-level accuracy."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigError(f"grid shape mismatch {pred.shape} vs {gt.shape}")
    iou, dice = {}, {}
    for c in np.unique(gt):
        p, g = pred == c, gt == c
        inter = int(np.sum(p & g))
        union = int(np.sum(p | g))
        iou[int(c)] = inter / union
        dice[int(c)] = 2 * inter / (int(p.sum()) + int(g.sum()))
    return {
        "iou": iou,
        "dice": dice,
        "miou": float(np.mean(list(iou.values()))),
        "mdice": float(np.mean(list(dice.values()))),
        "acc": float(np.mean(pred == gt)),
    }


def consistency_pct(miou_mid: float, miou_high: float) -> float:
    """Share of MID-level mean IoU retained at HIGH, in percent."""
    if miou_mid <= 0:
        return 0.0
    return 100.0 * miou_high / miou_mid
