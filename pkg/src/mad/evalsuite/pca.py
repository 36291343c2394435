"""Two-component PCA of MID parents and HIGH children for pair plots."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..tiler import Transition
from .embeddings import EmbeddingSet

PCA_COLUMNS = ("row_id", "level", "class", "pc1", "pc2", "parent_row_id")


def principal_axes(X, n_components: int = 2):
    """Top eigenpairs of the covariance of ``X`` (rows are samples).

    Each axis is signed so that its first nonzero entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < n_components:
        raise ConfigError(f"need at least {n_components} dimensions, got shape {X.shape}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1][:n_components]
    vals, vecs = vals[order], vecs[:, order].copy()
    for j in range(n_components):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > 1e-12)
        if nz.size and vecs[nz[0], j] < 0:
            vecs[:, j] *= -1
    return mean, vals, vecs


def pca_project(X, n_components: int = 2):
    mean, vals, vecs = principal_axes(X, n_components)
    return (np.asarray(X, dtype=np.float64) - mean) @ vecs, vals


def pca_rows(mid_set: EmbeddingSet, high_set: EmbeddingSet, manifest) -> list[dict]:
    if mid_set.dim != high_set.dim:
        raise ConfigError("mid and high embeddings differ in dimension")
    proj, _ = pca_project(np.concatenate([mid_set.rows, high_set.rows]))
    families = manifest.pairs.get(Transition.MID_TO_HIGH, {})
    child_parent = {k: p for p, kids in families.items() for k in kids}
    mid_row = {k: i for i, k in enumerate(mid_set.keys)}
    rows = []
    for i, rec in enumerate(mid_set.meta + high_set.meta):
        parent = ""
        if i >= len(mid_set):
            p = child_parent.get(rec.key)
            parent = mid_row.get(p, "") if p is not None else ""
        rows.append({
            "row_id": i,
            "level": rec.level.name,
            "class": rec.label,
            "pc1": float(proj[i, 0]),
            "pc2": float(proj[i, 1]),
            "parent_row_id": parent,
        })
    return rows


def pca_export(mid_set: EmbeddingSet, high_set: EmbeddingSet, manifest, path) -> list[dict]:
    rows = pca_rows(mid_set, high_set, manifest)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PCA_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "pc1": repr(r["pc1"]), "pc2": repr(r["pc2"])})
    return rows
