"""Zero-shot tile-grid segmentation with a MID-trained probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..nnet import ViTConfig
from ..slidegen import MagTag, SlidePyramid
from ..tiler import tile_grid
from .embeddings import embed_records
from .metrics import consistency_pct, seg_scores
from .probe import LinearProbe, require_zero_shot


@dataclass
class SegReport:
    levels: dict = field(default_factory=dict)  # level name -> seg_scores dict
    consistency_pct: float | None = None

    def summary(self) -> dict:
        out = {
            name.lower(): {k: self.levels[name][k] for k in ("miou", "mdice", "acc")} for name in self.levels
        }
        out["consistency_pct"] = self.consistency_pct
        return out


def grid_shape(slide: SlidePyramid, level, tile_px: int) -> tuple[int, int]:
    lv = slide.level(MagTag(level))
    return lv.labels.shape[0] // tile_px, lv.labels.shape[1] // tile_px


def gt_grid(slide: SlidePyramid, level, tile_px: int) -> np.ndarray:
    recs = tile_grid(slide, level, tile_px)
    return np.array([r.label for r in recs]).reshape(grid_shape(slide, level, tile_px))


def segment(params, cfg: ViTConfig, probe: LinearProbe, slide: SlidePyramid, level, threads: int = 1,
            cache: dict | None = None) -> np.ndarray:
    """Probe predictions for every tile of ``slide`` at ``level`` as a grid.

    ``cache`` maps tile keys to embeddings already computed.
    """
    require_zero_shot(probe)
    tile_px = cfg.image_px
    recs = tile_grid(slide, level, tile_px)
    cache = {} if cache is None else cache
    todo = [r for r in recs if r.key not in cache]
    if todo:
        rows = embed_records(params, cfg, {slide.slide_id: slide}, todo, threads)
        for r, e in zip(todo, rows):
            cache[r.key] = e
    X = np.stack([cache[r.key] for r in recs])
    return probe.predict(X).reshape(grid_shape(slide, level, tile_px))


def seg_metrics(pred_grid, gt_grid_) -> dict:
    pred_grid, gt_grid_ = np.asarray(pred_grid), np.asarray(gt_grid_)
    if pred_grid.shape != gt_grid_.shape:
        raise ConfigError(f"grid shape mismatch {pred_grid.shape} vs {gt_grid_.shape}")
    return seg_scores(pred_grid, gt_grid_)


def segmentation_report(params, cfg, probe, slides, levels=(MagTag.MID, MagTag.HIGH), threads=1,
                        cache=None) -> SegReport:
    """Pool tile predictions over ``slides`` per level, then score."""
    rep = SegReport()
    for level in levels:
        preds, gts = [], []
        for s in slides:
            preds.append(segment(params, cfg, probe, s, level, threads, cache).ravel())
            gts.append(gt_grid(s, level, cfg.image_px).ravel())
        rep.levels[MagTag(level).name] = seg_metrics(np.concatenate(preds), np.concatenate(gts))
    if "MID" in rep.levels and "HIGH" in rep.levels:
        rep.consistency_pct = consistency_pct(rep.levels["MID"]["miou"], rep.levels["HIGH"]["miou"])
    return rep
