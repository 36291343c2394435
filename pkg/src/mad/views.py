"""Training view construction.

Three sampler modes share one output type:

* ``MAD_PAIR``: a parent tile (teacher context, two augmentations) and four of
  its sixteen aligned children at the next level (student detail views).
* ``STANDALONE``: one tile, two teacher and four student augmentations.
* ``BASELINE``: one tile, random-resized crops in the usual multi-crop style.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .slidegen import MagTag, SlidePyramid
from .tiler import (
    N_CHILDREN,
    Kind,
    Split,
    TileIndex,
    TileManifest,
    Transition,
    extract_raw,
    parent_of,
)

N_TEACHER_VIEWS = 2
N_STUDENT_VIEWS = 4


class ViewMode(str, enum.Enum):
    MAD_PAIR = "MAD_PAIR"
    STANDALONE = "STANDALONE"
    BASELINE = "BASELINE"


@dataclass
class AugParams:
    flip_prob: float = 0.5
    brightness_range: tuple = (0.6, 1.4)
    contrast_range: tuple = (0.6, 1.4)
    saturation_range: tuple = (0.6, 1.4)
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5

    def validate(self) -> None:
        for name in ("flip_prob", "solarize_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} outside [0, 1]")
        for name in ("brightness_range", "contrast_range", "saturation_range"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 2.0):
                raise ConfigError(f"{name}={(lo, hi)} must satisfy 0 < lo <= hi <= 2")

    @classmethod
    def identity(cls) -> "AugParams":
        return cls(0.0, (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), 0.0, 0.5)


@dataclass
class ViewBatch:
    mode: ViewMode
    transition: Transition
    teacher_views: np.ndarray  # (2, P, P, 3) float32
    student_views: np.ndarray  # (4, P, P, 3) float32
    context_index: TileIndex
    student_indices: list
    slide_id: str
    seed_trace: int
    labels: dict = field(default_factory=dict)

    def check(self) -> None:
        if len(self.teacher_views) != N_TEACHER_VIEWS or len(self.student_views) != N_STUDENT_VIEWS:
            raise AssertionError("a batch carries 2 teacher and 4 student views")
        if self.mode == ViewMode.MAD_PAIR:
            if any(parent_of(s) != self.context_index for s in self.student_indices):
                raise AssertionError("student view not aligned with teacher context")
            if len(set(self.student_indices)) != len(self.student_indices):
                raise AssertionError("duplicate student tiles")


def augment(tile: np.ndarray, params: AugParams, rng: np.random.Generator) -> np.ndarray:
    """Flips, brightness, contrast, saturation and solarisation, in that order.

    Always consumes the same number of random draws so streams stay aligned
    regardless of which transforms fire.
    """
    u = rng.random(3)
    ub = rng.uniform(*params.brightness_range)
    uc = rng.uniform(*params.contrast_range)
    us = rng.uniform(*params.saturation_range)

    x = np.asarray(tile, dtype=np.float32)
    if u[0] < params.flip_prob:
        x = x[:, ::-1]
    if u[1] < params.flip_prob:
        x = x[::-1]
    x = np.clip(x * np.float32(ub), 0.0, 1.0)
    mean = np.float32(x.mean(dtype=np.float64))
    x = np.clip((x - mean) * np.float32(uc) + mean, 0.0, 1.0)
    gray = x.mean(axis=-1, keepdims=True)
    x = np.clip((x - gray) * np.float32(us) + gray, 0.0, 1.0)
    if u[2] < params.solarize_prob:
        x = np.where(x > params.solarize_threshold, np.float32(1.0) - x, x)
    return np.ascontiguousarray(np.clip(x, 0.0, 1.0), dtype=np.float32)


def resize_bilinear(img: np.ndarray, out_px: int) -> np.ndarray:
    """Bilinear resize of a square ``(s, s, C)`` image with half-pixel centres."""
    s = img.shape[0]
    pos = (np.arange(out_px) + 0.5) * (s / out_px) - 0.5
    pos = np.clip(pos, 0.0, s - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, s - 1)
    w = (pos - lo).astype(np.float32)
    rows = img[lo] * (1 - w)[:, None, None] + img[hi] * w[:, None, None]
    return rows[:, lo] * (1 - w)[None, :, None] + rows[:, hi] * w[None, :, None]


def crop_rect(tile_px: int, area_range: tuple, rng: np.random.Generator) -> tuple[int, int, int]:
    """Square crop ``(y, x, side)`` with area fraction drawn from ``area_range``."""
    area = rng.uniform(*area_range)
    side = int(np.clip(round(np.sqrt(area) * tile_px), 1, tile_px))
    y = int(rng.integers(0, tile_px - side + 1))
    x = int(rng.integers(0, tile_px - side + 1))
    return y, x, side


def random_resized_crop(tile: np.ndarray, area_range: tuple, rng: np.random.Generator) -> np.ndarray:
    y, x, side = crop_rect(tile.shape[0], area_range, rng)
    crop = tile[y : y + side, x : x + side]
    if side == tile.shape[0]:
        return np.array(crop, dtype=np.float32)
    return resize_bilinear(crop, tile.shape[0]).astype(np.float32)


class TileStore:
    """TRAIN-split pixel access and sampling pools for one manifest.

    TEST slides are never loaded, so no sampler can emit a TEST tile.
    """

    def __init__(self, manifest: TileManifest, slides):
        self.manifest = manifest
        self.tile_px = manifest.tile_px
        by_id = {s.slide_id: s for s in slides}
        self.slides: dict[str, SlidePyramid] = {
            sid: by_id[sid] for sid, sp in manifest.slide_splits.items() if sp == Split.TRAIN and sid in by_id
        }
        missing = [sid for sid, sp in manifest.slide_splits.items() if sp == Split.TRAIN and sid not in by_id]
        if missing:
            raise ConfigError(f"TRAIN slides not supplied: {missing}")
        self._cache: dict[tuple, np.ndarray] = {}
        self.families = {
            t: manifest.families(t, Split.TRAIN) for t in (Transition.LOW_TO_MID, Transition.MID_TO_HIGH)
        }
        train = [r for r in manifest.records if r.split == Split.TRAIN]
        self.standalone = [r.key for r in train if r.kind == Kind.STANDALONE]
        self.all_train = sorted({r.key for r in train})

    def pixels(self, key) -> np.ndarray:
        """uint8 tile for a record key ``(slide, level, coords)``."""
        arr = self._cache.get(key)
        if arr is None:
            slide = self.slides.get(key[0])
            if slide is None:
                raise ConfigError(f"tile {key} is not from a TRAIN slide")
            rec = self.manifest.record(key)
            arr = extract_raw(slide, rec)
            self._cache[key] = arr
        return arr

    def unit(self, key) -> np.ndarray:
        return self.pixels(key).astype(np.float32) / np.float32(255.0)


def _index(key) -> TileIndex:
    return TileIndex(MagTag(key[1]), key[2])


def _label(store: TileStore, key) -> int:
    return store.manifest.record(key).label


def sample_mad_batch(store: TileStore, transition, rng, aug: AugParams | None = None) -> ViewBatch:
    transition = Transition(transition)
    if transition == Transition.NONE:
        raise ConfigError("MAD batches need LOW_TO_MID or MID_TO_HIGH")
    pool = store.families[transition]
    if not pool:
        raise ConfigError(f"no TRAIN families for {transition.value}")
    aug = aug or AugParams()
    trace = int(rng.integers(0, 2**63))
    brng = np.random.default_rng(trace)

    parent = pool[int(brng.integers(len(pool)))]
    kids = store.manifest.pairs[transition][parent]
    pick = brng.choice(N_CHILDREN, size=N_STUDENT_VIEWS, replace=False)
    chosen = [kids[i] for i in pick]

    ctx = store.unit(parent)
    teacher = np.stack([augment(ctx, aug, brng) for _ in range(N_TEACHER_VIEWS)])
    student = np.stack([augment(store.unit(k), aug, brng) for k in chosen])
    batch = ViewBatch(
        mode=ViewMode.MAD_PAIR,
        transition=transition,
        teacher_views=teacher,
        student_views=student,
        context_index=_index(parent),
        student_indices=[_index(k) for k in chosen],
        slide_id=parent[0],
        seed_trace=trace,
        labels={"context": _label(store, parent), "students": [_label(store, k) for k in chosen]},
    )
    batch.check()
    return batch


def _single_tile_batch(store, pool, rng, mode, make_teacher, make_student) -> ViewBatch:
    if not pool:
        raise ConfigError("empty TRAIN tile pool")
    trace = int(rng.integers(0, 2**63))
    brng = np.random.default_rng(trace)
    key = pool[int(brng.integers(len(pool)))]
    tile = store.unit(key)
    teacher = np.stack([make_teacher(tile, brng) for _ in range(N_TEACHER_VIEWS)])
    student = np.stack([make_student(tile, brng) for _ in range(N_STUDENT_VIEWS)])
    idx = _index(key)
    return ViewBatch(
        mode=mode,
        transition=Transition.NONE,
        teacher_views=teacher,
        student_views=student,
        context_index=idx,
        student_indices=[idx] * N_STUDENT_VIEWS,
        slide_id=key[0],
        seed_trace=trace,
        labels={"context": _label(store, key)},
    )


def sample_standalone_batch(store: TileStore, rng, aug: AugParams | None = None) -> ViewBatch:
    aug = aug or AugParams()
    view = lambda t, r: augment(t, aug, r)
    return _single_tile_batch(store, store.standalone, rng, ViewMode.STANDALONE, view, view)


GLOBAL_AREA = (0.4, 1.0)
LOCAL_AREA = (0.15, 0.5)


def sample_baseline_batch(
    store: TileStore,
    rng,
    aug: AugParams | None = None,
    global_area: tuple = GLOBAL_AREA,
    local_area: tuple = LOCAL_AREA,
) -> ViewBatch:
    aug = aug or AugParams()
    return _single_tile_batch(
        store,
        store.all_train,
        rng,
        ViewMode.BASELINE,
        lambda t, r: augment(random_resized_crop(t, global_area, r), aug, r),
        lambda t, r: augment(random_resized_crop(t, local_area, r), aug, r),
    )


def choose_source(rng, rho: float, step: int = 0, total_steps: int = 1, curriculum: str = "interleaved"):
    """Pick the sampler for one batch in MAD mode.

    ``interleaved``: MID_TO_HIGH and LOW_TO_MID each with ``(1 - rho) / 2``,
    STANDALONE with ``rho``. ``staged`` runs LOW_TO_MID pairs for the first
    half of training and MID_TO_HIGH pairs afterwards.
    """
    u = rng.random()
    if u < rho:
        return Transition.NONE
    if curriculum == "staged":
        return Transition.LOW_TO_MID if step < total_steps // 2 else Transition.MID_TO_HIGH
    if curriculum != "interleaved":
        raise ConfigError(f"unknown curriculum {curriculum!r}")
    return Transition.MID_TO_HIGH if u < rho + (1 - rho) / 2 else Transition.LOW_TO_MID
