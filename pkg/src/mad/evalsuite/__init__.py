"""Frozen-embedding evaluation."""

from .cluster import KMeansClusterer, kmeans
from .consistency import ConsistencyReport, consistency_analysis
from .embeddings import EmbeddingSet, Net, embed_tiles, read_embeddings, write_embeddings
from .evaluate import EvalConfig, evaluate
from .metrics import ami, dbi, macro_f1, seg_scores
from .neighbors import KNNClassifier, knn_classify
from .pca import pca_export
from .probe import LinearProbe, train_probe
from .segmentation import SegReport, seg_metrics, segment

__all__ = [
    "ConsistencyReport", "EmbeddingSet", "EvalConfig", "KMeansClusterer", "KNNClassifier", "LinearProbe",
    "Net", "SegReport", "ami", "consistency_analysis", "dbi", "embed_tiles", "evaluate", "kmeans",
    "knn_classify", "macro_f1", "pca_export", "read_embeddings", "seg_metrics", "seg_scores", "segment",
    "train_probe", "write_embeddings",
]
