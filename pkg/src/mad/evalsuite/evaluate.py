"""End-to-end evaluation of one checkpoint."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from ..slidegen import MagTag
from ..tiler import Split
from .cluster import kmeans
from .consistency import consistency_analysis
from .embeddings import EmbeddingSet, embed_tiles
from .metrics import ami, dbi, f1_table
from .neighbors import knn_classify
from .pca import pca_export
from .probe import LinearProbe, train_probe
from .segmentation import segmentation_report

METRIC_KEYS = ("probe_f1_per_class", "knn_f1_per_class", "ami", "dbi", "consistency", "segmentation")


@dataclass
class ProbeParams:
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 20


@dataclass
class EvalConfig:
    k: int = 20
    kmeans_k: int = 5
    kmeans_restarts: int = 10
    kmeans_iters: int = 100
    n_neg: int = 4
    net: str = "TEACHER"
    seed: int = 0
    probe: ProbeParams = field(default_factory=ProbeParams)

    def validate(self) -> None:
        if self.k < 1 or self.kmeans_k < 2 or self.n_neg < 1:
            raise ConfigError("eval needs k >= 1, kmeans_k >= 2 and n_neg >= 1")
        if self.net not in ("TEACHER", "STUDENT"):
            raise ConfigError(f"net must be TEACHER or STUDENT, got {self.net!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d) -> "EvalConfig":
        d = dict(d or {})
        probe = ProbeParams(**d.pop("probe", {}) or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
        return cls(probe=probe, **d)


def embedding_sets(params, vit_cfg, manifest, slides, net="TEACHER", ckpt_id="", threads=1):
    """(TRAIN, TEST) embedding sets over all distinct manifest tiles."""
    common = dict(net=net, ckpt_id=ckpt_id, threads=threads)
    train = embed_tiles(params, vit_cfg, manifest, slides, splits=[Split.TRAIN], **common)
    test = embed_tiles(params, vit_cfg, manifest, slides, splits=[Split.TEST], **common)
    return train, test


def fit_probes(train: EmbeddingSet, ecfg: EvalConfig) -> tuple[LinearProbe, LinearProbe]:
    """Probe on every TRAIN tile, and the zero-shot probe on MID TRAIN tiles."""
    kw = dict(lr=ecfg.probe.lr, batch_size=ecfg.probe.batch_size, epochs=ecfg.probe.epochs, seed=ecfg.seed)
    full = train_probe(train, **kw)
    mid = train_probe(train.where(levels=[MagTag.MID]), **kw)
    return full, mid


def _named(table: dict, names) -> dict:
    return {names[c] if c < len(names) else str(c): v for c, v in sorted(table.items())}


def evaluate(
    params,
    vit_cfg,
    manifest,
    slides,
    train: EmbeddingSet,
    test: EmbeddingSet,
    probe_all: LinearProbe,
    probe_mid: LinearProbe,
    ecfg: EvalConfig,
    threads: int = 1,
    pca_path=None,
) -> dict:
    """Compute the metrics dictionary (fixed keys plus diagnostics)."""
    names = list(manifest.class_names)
    y_test = test.labels
    slides = slides if isinstance(slides, dict) else {s.slide_id: s for s in slides}

    probe_pred = probe_all.predict(test.rows)
    knn_pred = knn_classify(train.rows, train.labels, test.rows, k=min(ecfg.k, len(train)))
    probe_f1 = f1_table(probe_pred, y_test)
    knn_f1 = f1_table(knn_pred, y_test)

    clusters, _, wcss = kmeans(test.rows, ecfg.kmeans_k, ecfg.kmeans_restarts, ecfg.kmeans_iters, ecfg.seed)
    ami_val = ami(y_test, clusters)
    try:
        dbi_val = dbi(test.rows, clusters)
    except ConfigError:
        dbi_val = None

    mid = test.where(levels=[MagTag.MID])
    high = test.where(levels=[MagTag.HIGH])
    cons = consistency_analysis(mid, high, manifest, n_neg=ecfg.n_neg, seed=ecfg.seed)

    cache = {k: r for k, r in zip(test.keys, test.rows)}
    test_slides = [slides[sid] for sid, sp in sorted(manifest.slide_splits.items()) if sp == Split.TEST]
    seg = segmentation_report(params, vit_cfg, probe_mid, test_slides, threads=threads, cache=cache)

    if pca_path is not None:
        pca_export(mid, high, manifest, pca_path)

    return {
        "probe_f1_per_class": _named(probe_f1, names),
        "knn_f1_per_class": _named(knn_f1, names),
        "ami": ami_val,
        "dbi": dbi_val,
        "consistency": cons.summary(),
        "segmentation": seg.summary(),
        "details": {
            "probe_macro_f1": float(np.mean(list(probe_f1.values()))),
            "knn_macro_f1": float(np.mean(list(knn_f1.values()))),
            "kmeans_wcss": wcss,
            "ami_normalization": "arithmetic",
            "consistency_per_class": {names[c]: v for c, v in cons.per_class.items()},
            "consistency_per_class_mean": cons.per_class_mean,
            "consistency_n_parents": cons.n_parents,
            "consistency_n_skipped": cons.n_skipped,
            "segmentation_per_class_iou": {
                lvl: _named(rep["iou"], names) for lvl, rep in seg.levels.items()
            },
            "probe_train_accuracy": {"all": probe_all.train_accuracy_, "mid": probe_mid.train_accuracy_},
            "zero_shot_probe_provenance": [list(p) for p in probe_mid.provenance_],
            "n_train": len(train),
            "n_test": len(test),
        },
    }
