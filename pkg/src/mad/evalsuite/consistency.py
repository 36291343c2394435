"""Cross-magnification similarity gaps between MID parents and HIGH tiles."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from ..tiler import Split, Transition
from .embeddings import EmbeddingSet
from .neighbors import l2_normalize


@dataclass
class ConsistencyReport:
    s_pos: float
    s_neg_same: float
    s_neg_diff: float
    delta_hier: float
    delta_sem: float
    n_parents: int = 0
    n_neg_per_parent: int = 0
    n_skipped: int = 0
    per_class: dict = field(default_factory=dict)
    per_class_mean: dict = field(default_factory=dict)

    @classmethod
    def from_similarities(cls, s_pos: float, s_neg_same: float, s_neg_diff: float, **extra) -> "ConsistencyReport":
        return cls(
            s_pos=float(s_pos),
            s_neg_same=float(s_neg_same),
            s_neg_diff=float(s_neg_diff),
            delta_hier=float(s_pos) - float(s_neg_same),
            delta_sem=float(s_neg_same) - float(s_neg_diff),
            **extra,
        )

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("s_pos", "s_neg_same", "s_neg_diff", "delta_hier", "delta_sem")}

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d


def _means(rows: np.ndarray) -> tuple[float, float, float]:
    m = rows.mean(axis=0)
    return float(m[0]), float(m[1]), float(m[2])


def consistency_analysis(
    mid_set: EmbeddingSet, high_set: EmbeddingSet, manifest, n_neg: int = 4, seed: int = 0
) -> ConsistencyReport:
    """Per MID parent: mean cosine to its HIGH children present in
    ``high_set`` and to ``n_neg`` sampled non-child HIGH tiles of the same
    and of a different class. Parents lacking children or either negative
    pool are skipped and counted."""
    if mid_set.dim != high_set.dim:
        raise ConfigError("mid and high embeddings differ in dimension")
    if n_neg < 1:
        raise ConfigError("n_neg must be positive")
    for es in (mid_set, high_set):
        if any(r.split != Split.TEST for r in es.meta):
            raise ConfigError("consistency analysis runs on TEST tiles only")
    families = manifest.pairs.get(Transition.MID_TO_HIGH, {})
    mid = l2_normalize(mid_set.rows)
    high = l2_normalize(high_set.rows)
    high_labels = high_set.labels
    high_pos = {k: i for i, k in enumerate(high_set.keys)}
    rng = np.random.default_rng(seed)

    sims, classes, skipped = [], [], 0
    for i, rec in enumerate(mid_set.meta):
        kids = families.get(rec.key)
        if kids is None:
            continue
        child_rows = [high_pos[k] for k in kids if k in high_pos]
        excluded = np.zeros(len(high_set), dtype=bool)
        excluded[child_rows] = True
        same = np.flatnonzero(~excluded & (high_labels == rec.label))
        diff = np.flatnonzero(~excluded & (high_labels != rec.label))
        if not child_rows or same.size == 0 or diff.size == 0:
            skipped += 1
            continue
        pick_same = rng.choice(same, size=min(n_neg, same.size), replace=False)
        pick_diff = rng.choice(diff, size=min(n_neg, diff.size), replace=False)
        e = mid[i]
        sims.append((
            float((high[child_rows] @ e).mean()),
            float((high[pick_same] @ e).mean()),
            float((high[pick_diff] @ e).mean()),
        ))
        classes.append(rec.label)

    if not sims:
        raise ConfigError(f"no evaluable MID parents ({skipped} skipped)")
    sims = np.array(sims)
    classes = np.array(classes)
    per_class = {}
    for c in np.unique(classes):
        sp, ss, sd = _means(sims[classes == c])
        per_class[int(c)] = {
            "s_pos": sp, "s_neg_same": ss, "s_neg_diff": sd,
            "delta_hier": sp - ss, "delta_sem": ss - sd, "n_parents": int((classes == c).sum()),
        }
    cm = {k: float(np.mean([v[k] for v in per_class.values()])) for k in ("s_pos", "s_neg_same", "s_neg_diff")}
    cm["delta_hier"] = cm["s_pos"] - cm["s_neg_same"]
    cm["delta_sem"] = cm["s_neg_same"] - cm["s_neg_diff"]
    return ConsistencyReport.from_similarities(
        *_means(sims),
        n_parents=len(sims),
        n_neg_per_parent=n_neg,
        n_skipped=skipped,
        per_class=per_class,
        per_class_mean=cm,
    )
