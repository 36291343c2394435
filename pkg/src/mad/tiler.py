"""Hierarchical tile grids, parent/child indexing and capped tile manifests.

A LOW tile at grid cell ``(i, j)`` owns the 4x4 MID cells ``(4i + r, 4j + c)``,
addressed as ``(i, j, k)`` with ``k = 4r + c``. MID tiles extend the same way
to HIGH tiles ``(i, j, k, m)``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, FormatError
from .slidegen import SCALE_FACTOR, MagTag, SlidePyramid

SUBGRID = SCALE_FACTOR
N_CHILDREN = SUBGRID * SUBGRID
MANIFEST_VERSION = 1


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


class Kind(str, enum.Enum):
    ALIGNED = "ALIGNED"
    STANDALONE = "STANDALONE"


class Transition(str, enum.Enum):
    LOW_TO_MID = "LOW_TO_MID"
    MID_TO_HIGH = "MID_TO_HIGH"
    NONE = "NONE"

    @property
    def parent_level(self) -> MagTag:
        return {"LOW_TO_MID": MagTag.LOW, "MID_TO_HIGH": MagTag.MID}[self.value]


@dataclass(frozen=True, order=True)
class TileIndex:
    level: MagTag
    coords: tuple

    def __post_init__(self):
        level = MagTag(self.level)
        coords = tuple(int(c) for c in self.coords)
        object.__setattr__(self, "level", level)
        object.__setattr__(self, "coords", coords)
        if len(coords) != 2 + int(level):
            raise ConfigError(f"{level.name} index needs {2 + int(level)} coords, got {coords}")
        if coords[0] < 0 or coords[1] < 0:
            raise ConfigError(f"negative grid position in {coords}")
        if any(not 0 <= k < N_CHILDREN for k in coords[2:]):
            raise ConfigError(f"sub-grid index out of [0, {N_CHILDREN - 1}] in {coords}")

    @property
    def cell(self) -> tuple[int, int]:
        """(row, col) of this tile in its own level's grid."""
        row, col = self.coords[:2]
        for k in self.coords[2:]:
            r, c = divmod(k, SUBGRID)
            row, col = SUBGRID * row + r, SUBGRID * col + c
        return row, col

    @classmethod
    def from_cell(cls, level, row: int, col: int) -> "TileIndex":
        level = MagTag(level)
        subs = []
        for _ in range(int(level)):
            (row, r), (col, c) = divmod(row, SUBGRID), divmod(col, SUBGRID)
            subs.append(SUBGRID * r + c)
        return cls(level, (row, col, *reversed(subs)))


def children_of(idx: TileIndex) -> list[TileIndex]:
    if idx.level == MagTag.HIGH:
        raise ConfigError("HIGH-level tiles have no children")
    child_level = MagTag(idx.level + 1)
    return [TileIndex(child_level, (*idx.coords, k)) for k in range(N_CHILDREN)]


def parent_of(idx: TileIndex) -> TileIndex:
    if idx.level == MagTag.LOW:
        raise ConfigError("LOW-level tiles have no parent")
    return TileIndex(MagTag(idx.level - 1), idx.coords[:-1])


@dataclass(frozen=True)
class TileRecord:
    index: TileIndex
    slide_id: str
    x: int
    y: int
    tile_px: int
    label: int
    split: Split = Split.TRAIN
    kind: Kind = Kind.STANDALONE

    @property
    def level(self) -> MagTag:
        return self.index.level

    @property
    def key(self) -> tuple:
        """Identity of the underlying pixels (kind and split excluded)."""
        return (self.slide_id, int(self.index.level), self.index.coords)

    def to_json(self) -> dict:
        return {
            "slide": self.slide_id,
            "level": self.index.level.name,
            "coords": list(self.index.coords),
            "x": self.x,
            "y": self.y,
            "tile_px": self.tile_px,
            "label": self.label,
            "split": self.split.value,
            "kind": self.kind.value,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "TileRecord":
        return cls(
            index=TileIndex(MagTag[d["level"]], tuple(d["coords"])),
            slide_id=str(d["slide"]),
            x=int(d["x"]),
            y=int(d["y"]),
            tile_px=int(d["tile_px"]),
            label=int(d["label"]),
            split=Split(d["split"]),
            kind=Kind(d["kind"]),
        )


def _majority(block: np.ndarray, n_cls: int) -> int:
    return int(np.bincount(block.ravel(), minlength=n_cls).argmax())


def tile_labels(labels: np.ndarray, tile_px: int, n_cls: int | None = None) -> np.ndarray:
    """Majority class per tile over a label map; ties to the smallest id."""
    h, w = labels.shape
    if h % tile_px or w % tile_px:
        raise ConfigError(f"level {w}x{h} not divisible by tile_px {tile_px}")
    n_cls = n_cls or int(labels.max()) + 1
    blocks = labels.reshape(h // tile_px, tile_px, w // tile_px, tile_px)
    counts = np.stack([(blocks == c).sum(axis=(1, 3)) for c in range(n_cls)], axis=-1)
    return counts.argmax(axis=-1)


def tile_grid(slide: SlidePyramid, level, tile_px: int) -> list[TileRecord]:
    """All non-overlapping tiles of one level, row-major."""
    lv = slide.level(level)
    grid = tile_labels(lv.labels, tile_px, len(slide.class_names))
    rows, cols = grid.shape
    return [
        TileRecord(
            index=TileIndex.from_cell(lv.mag_tag, r, c),
            slide_id=slide.slide_id,
            x=c * tile_px,
            y=r * tile_px,
            tile_px=tile_px,
            label=int(grid[r, c]),
        )
        for r in range(rows)
        for c in range(cols)
    ]


def extract_pixels(slide: SlidePyramid, rec: TileRecord, dtype=np.float32) -> np.ndarray:
    """Crop of the record's rect as unit-interval reals ``(tile_px, tile_px, 3)``."""
    raw = extract_raw(slide, rec)
    return raw.astype(dtype) / dtype(255.0)


def extract_raw(slide: SlidePyramid, rec: TileRecord) -> np.ndarray:
    if rec.slide_id != slide.slide_id:
        raise ConfigError(f"record belongs to {rec.slide_id}, not {slide.slide_id}")
    lv = slide.level(rec.level)
    if rec.x < 0 or rec.y < 0 or rec.x + rec.tile_px > lv.width or rec.y + rec.tile_px > lv.height:
        raise ConfigError(f"tile rect at ({rec.x}, {rec.y}) size {rec.tile_px} outside level")
    return lv.raster[rec.y : rec.y + rec.tile_px, rec.x : rec.x + rec.tile_px]


def stitch_children(tiles: list[np.ndarray]) -> np.ndarray:
    """Assemble 16 child tiles (ordered by k) into one 4x4 mosaic."""
    if len(tiles) != N_CHILDREN:
        raise ConfigError(f"need {N_CHILDREN} tiles, got {len(tiles)}")
    rows = [np.concatenate(tiles[r * SUBGRID : (r + 1) * SUBGRID], axis=1) for r in range(SUBGRID)]
    return np.concatenate(rows, axis=0)


# --- manifests --------------------------------------------------------------


@dataclass
class Caps:
    """Per-class maxima. ``aligned`` caps parent families per transition,
    ``standalone`` caps standalone tiles (all levels pooled). Missing classes
    are uncapped."""

    aligned: dict = field(default_factory=dict)
    standalone: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, d: Mapping | None) -> "Caps":
        d = d or {}
        conv = lambda m: {int(k): int(v) for k, v in (m or {}).items()}
        return cls(aligned=conv(d.get("aligned")), standalone=conv(d.get("standalone")))

    def to_json(self) -> dict:
        return {
            "aligned": {str(k): v for k, v in sorted(self.aligned.items())},
            "standalone": {str(k): v for k, v in sorted(self.standalone.items())},
        }


@dataclass
class TileManifest:
    records: list[TileRecord]
    class_names: list[str]
    slide_splits: dict[str, Split]
    caps: Caps
    seed: int
    tile_px: int
    pairs: dict = field(default_factory=dict)  # Transition -> {parent key: [child keys]}
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.pairs:
            self.pairs = derive_pairs(self.records)
        self._by_key: dict[tuple, list[TileRecord]] = {}
        for rec in self.records:
            self._by_key.setdefault(rec.key, []).append(rec)

    def find(self, key) -> list[TileRecord]:
        return self._by_key.get(key, [])

    def record(self, key) -> TileRecord:
        return self._by_key[key][0]

    def select(self, levels=None, splits=None, kinds=None, unique: bool = False) -> list[TileRecord]:
        """Records matching the filter in manifest order; ``unique`` drops
        repeated pixels (a tile listed as both ALIGNED and STANDALONE)."""
        levels = None if levels is None else {MagTag(l) if not isinstance(l, str) else MagTag[l] for l in levels}
        splits = None if splits is None else {Split(s) for s in splits}
        kinds = None if kinds is None else {Kind(k) for k in kinds}
        seen = set()
        out = []
        for rec in self.records:
            if levels is not None and rec.level not in levels:
                continue
            if splits is not None and rec.split not in splits:
                continue
            if kinds is not None and rec.kind not in kinds:
                continue
            if unique:
                if rec.key in seen:
                    continue
                seen.add(rec.key)
            out.append(rec)
        return out

    def families(self, transition: Transition, split=Split.TRAIN) -> list[tuple]:
        """Parent keys of the transition whose slide is in ``split``."""
        split = Split(split)
        return [k for k in self.pairs.get(Transition(transition), {}) if self.slide_splits[k[0]] == split]


def _sort_key(rec: TileRecord):
    return (rec.slide_id, int(rec.index.level), rec.index.coords, rec.kind.value)


def derive_pairs(records: Iterable[TileRecord]) -> dict:
    """Rebuild the parent -> children table from ALIGNED records.

    A parent-level ALIGNED record heads a family when all 16 children are
    present as ALIGNED records.
    """
    aligned = {rec.key for rec in records if rec.kind == Kind.ALIGNED}
    pairs: dict = {Transition.LOW_TO_MID: {}, Transition.MID_TO_HIGH: {}}
    for key in sorted(aligned):
        slide, level, coords = key
        if level == MagTag.HIGH:
            continue
        kids = [(slide, level + 1, (*coords, k)) for k in range(N_CHILDREN)]
        if all(k in aligned for k in kids):
            t = Transition.LOW_TO_MID if level == MagTag.LOW else Transition.MID_TO_HIGH
            pairs[t][key] = kids
    return pairs


def _resolve_splits(slides, split_assignment) -> dict[str, Split]:
    ids = [s.slide_id for s in slides]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate slide ids")
    out: dict[str, Split] = {}
    if all(k in ("TRAIN", "TEST") for k in split_assignment) and any(
        isinstance(v, (list, tuple)) for v in split_assignment.values()
    ):
        for split_name, members in split_assignment.items():
            for sid in members:
                if sid in out:
                    raise ConfigError(f"slide {sid} assigned to both splits")
                out[sid] = Split(split_name)
    else:
        out = {sid: Split(v) for sid, v in split_assignment.items()}
    missing = [sid for sid in ids if sid not in out]
    if missing:
        raise ConfigError(f"slides without split assignment: {missing}")
    return {sid: out[sid] for sid in ids}


def _cap_select(candidates: list, labels: list[int], caps: Mapping[int, int], rng) -> list:
    """Seeded uniform subsample per class; keeps original order."""
    by_class: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    keep = []
    for lab in sorted(by_class):
        idx = by_class[lab]
        cap = caps.get(lab)
        if cap is None or len(idx) <= cap:
            keep.extend(idx)
            continue
        if cap < 1:
            raise ConfigError(f"cap for class {lab} is {cap} but class has tiles")
        chosen = rng.choice(len(idx), size=cap, replace=False)
        keep.extend(idx[i] for i in chosen)
    return [candidates[i] for i in sorted(keep)]


def build_manifest(
    slides: list[SlidePyramid],
    tile_px: int,
    caps: Caps | Mapping | None,
    split_assignment: Mapping,
    seed: int,
) -> TileManifest:
    caps = caps if isinstance(caps, Caps) else Caps.from_json(caps)
    splits = _resolve_splits(slides, split_assignment)
    rng = np.random.default_rng(seed)
    slides = sorted(slides, key=lambda s: s.slide_id)
    class_names = list(slides[0].class_names) if slides else []

    grids = {(s.slide_id, tag): tile_grid(s, tag, tile_px) for s in slides for tag in MagTag}
    lookup = {rec.key: rec for recs in grids.values() for rec in recs}

    out: dict[tuple, TileRecord] = {}

    def emit(rec: TileRecord, kind: Kind):
        rec = replace(rec, split=splits[rec.slide_id], kind=kind)
        out[(rec.key, kind)] = rec

    for parent_tag in (MagTag.LOW, MagTag.MID):
        parents = [r for s in slides for r in grids[(s.slide_id, parent_tag)] if r.label != 0]
        kept = _cap_select(parents, [p.label for p in parents], caps.aligned, rng)
        for p in kept:
            emit(p, Kind.ALIGNED)
            for child in children_of(p.index):
                emit(lookup[(p.slide_id, int(child.level), child.coords)], Kind.ALIGNED)

    pool = [r for s in slides for tag in MagTag for r in grids[(s.slide_id, tag)]]
    for rec in _cap_select(pool, [r.label for r in pool], caps.standalone, rng):
        emit(rec, Kind.STANDALONE)

    records = sorted(out.values(), key=_sort_key)
    return TileManifest(
        records=records,
        class_names=class_names,
        slide_splits=splits,
        caps=caps,
        seed=int(seed),
        tile_px=tile_px,
    )


def write_manifest(manifest: TileManifest, path, extra_header: Mapping | None = None) -> None:
    header = {
        "version": MANIFEST_VERSION,
        "scale_factor": SCALE_FACTOR,
        "class_names": manifest.class_names,
        "seed": manifest.seed,
        "tile_px": manifest.tile_px,
        "caps": manifest.caps.to_json(),
        "slide_splits": {k: v.value for k, v in manifest.slide_splits.items()},
    }
    header.update(manifest.meta)
    if extra_header:
        header.update(extra_header)
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> TileManifest:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"tile manifest {path} not found")
    lines = path.read_text().splitlines()
    try:
        header = json.loads(lines[0])
        if header.get("version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {header.get('version')}")
        records = [TileRecord.from_json(json.loads(line)) for line in lines[1:] if line.strip()]
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt tile manifest {path}: {exc}") from exc
    known = {"version", "scale_factor", "class_names", "seed", "tile_px", "caps", "slide_splits"}
    return TileManifest(
        records=records,
        class_names=list(header["class_names"]),
        slide_splits={k: Split(v) for k, v in header.get("slide_splits", {}).items()},
        caps=Caps.from_json(header.get("caps")),
        seed=int(header["seed"]),
        tile_px=int(header.get("tile_px", records[0].tile_px if records else 0)),
        meta={k: v for k, v in header.items() if k not in known},
    )
