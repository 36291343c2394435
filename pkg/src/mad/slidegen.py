"""Synthetic three-level slide pyramids and their on-disk directory format.

The HIGH level is generated procedurally; MID and LOW are derived from it with
a 4x box filter (rasters) and a 4x majority vote (label maps).
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .errors import ConfigError, FormatError

SCALE_FACTOR = 4

DEFAULT_CLASS_NAMES = (
    "Background",
    "Gray Matter",
    "White Matter",
    "Leptomeninges",
    "Superficial Cortex",
)


class MagTag(enum.IntEnum):
    LOW = 0
    MID = 1
    HIGH = 2


@dataclass
class Level:
    mag_tag: MagTag
    raster: np.ndarray  # (H, W, 3) uint8
    labels: np.ndarray  # (H, W) uint8 class ids

    @property
    def height(self) -> int:
        return int(self.raster.shape[0])

    @property
    def width(self) -> int:
        return int(self.raster.shape[1])


@dataclass
class SlidePyramid:
    slide_id: str
    levels: list[Level]
    class_names: list[str]
    scale_factor: int = SCALE_FACTOR
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def level(self, tag) -> Level:
        return self.levels[int(tag)]

    def validate(self) -> None:
        if len(self.levels) != 3:
            raise ConfigError(f"expected 3 levels, got {len(self.levels)}")
        if self.scale_factor != SCALE_FACTOR:
            raise ConfigError(f"scale_factor must be {SCALE_FACTOR}")
        for i, lv in enumerate(self.levels):
            if lv.mag_tag != MagTag(i):
                raise ConfigError(f"level {i} has tag {lv.mag_tag.name}")
            if lv.raster.shape[:2] != lv.labels.shape:
                raise ConfigError(f"level {lv.mag_tag.name}: raster/label shape mismatch")
            if lv.labels.size and int(lv.labels.max()) >= len(self.class_names):
                raise ConfigError(f"level {lv.mag_tag.name}: label out of range")
        for lo, hi in zip(self.levels[:-1], self.levels[1:]):
            if (hi.height, hi.width) != (lo.height * SCALE_FACTOR, lo.width * SCALE_FACTOR):
                raise ConfigError("adjacent levels must differ by the scale factor")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SlidePyramid):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.class_names == other.class_names
            and self.scale_factor == other.scale_factor
            and self.seed == other.seed
            and self.meta == other.meta
            and len(self.levels) == len(other.levels)
            and all(
                a.mag_tag == b.mag_tag
                and np.array_equal(a.raster, b.raster)
                and np.array_equal(a.labels, b.labels)
                for a, b in zip(self.levels, other.levels)
            )
        )


# Base colours loosely follow H&E stained tissue; background is near white.
# Hues sit roughly 70-90 degrees apart so classes survive colour jitter.
DEFAULT_PALETTE = (
    (0.93, 0.92, 0.94),
    (0.80, 0.35, 0.60),
    (0.45, 0.40, 0.80),
    (0.85, 0.52, 0.30),
    (0.35, 0.70, 0.62),
)
# Integer wave vectors. At frequency 1/4 a wave sums to zero over a 4x4 block
# and vanishes after one downsampling step; at 1/16 it survives one step and
# reappears at MID with period 4.
DEFAULT_TEXTURE_DIRS = ((0, 0), (1, 0), (1, 0), (0, 1), (0, 1))


@dataclass
class SynthConfig:
    base_size: int = 1024
    tile_px: int = 32
    n_region_seeds: int = 12
    class_names: tuple = DEFAULT_CLASS_NAMES
    class_palette: tuple = DEFAULT_PALETTE
    texture_freq: tuple = (0.0, 0.25, 0.0625, 0.25, 0.0625)
    texture_amp: tuple = (0.0, 0.25, 0.25, 0.25, 0.25)
    texture_dirs: tuple = DEFAULT_TEXTURE_DIRS
    noise_sigma: float = 0.05
    # (centre jitter, min radius, max radius, boundary warp amplitude), as fractions of base_size
    tissue_blob_params: tuple = (0.05, 0.45, 0.56, 0.03)
    min_class_share: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        n = len(self.class_names)
        if n < 2:
            raise ConfigError("need at least one tissue class besides Background")
        if self.tile_px <= 0 or self.base_size <= 0:
            raise ConfigError("base_size and tile_px must be positive")
        if self.base_size % (SCALE_FACTOR * SCALE_FACTOR * self.tile_px):
            raise ConfigError(
                f"base_size {self.base_size} must be divisible by 16*tile_px "
                f"({16 * self.tile_px}) so all levels tile exactly"
            )
        for name in ("class_palette", "texture_freq", "texture_amp", "texture_dirs"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} needs one entry per class ({n})")
        for d in self.texture_dirs:
            if len(d) != 2 or any(int(v) != v for v in d):
                raise ConfigError(f"texture_dirs entries must be integer pairs, got {d!r}")
        if self.n_region_seeds < n - 1:
            raise ConfigError("n_region_seeds must be at least the number of tissue classes")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Unit-interval reals to 8-bit, rounding half up."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def box_downsample(raster: np.ndarray, factor: int = SCALE_FACTOR) -> np.ndarray:
    """Mean over ``factor x factor`` blocks, rounded half up to 8-bit.

    Works on ``(H, W)`` and ``(H, W, C)`` uint8 arrays. The block sum is exact in
    integers, so ``(sum + f*f/2) // (f*f)`` is the half-up rounding of the mean
    whenever ``f*f`` is even.
    """
    raster = np.asarray(raster)
    h, w = raster.shape[:2]
    if h % factor or w % factor:
        raise ConfigError(f"raster {h}x{w} not divisible by factor {factor}")
    area = factor * factor
    blocks = raster.reshape(h // factor, factor, w // factor, factor, *raster.shape[2:])
    total = blocks.sum(axis=(1, 3), dtype=np.int64)
    if area % 2 == 0:
        out = (total + area // 2) // area
    else:
        out = np.floor(total / area + 0.5)
    return out.astype(np.uint8)


def majority_pool(labels: np.ndarray, factor: int = SCALE_FACTOR) -> np.ndarray:
    """Most frequent class per block; ties go to the smallest class id."""
    labels = np.asarray(labels)
    h, w = labels.shape
    if h % factor or w % factor:
        raise ConfigError(f"label map {h}x{w} not divisible by factor {factor}")
    n_cls = int(labels.max()) + 1 if labels.size else 1
    blocks = labels.reshape(h // factor, factor, w // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // factor, w // factor, factor * factor)
    counts = np.stack([(blocks == c).sum(axis=-1) for c in range(n_cls)], axis=-1)
    # argmax returns the first maximum, i.e. the smallest id among ties
    return counts.argmax(axis=-1).astype(labels.dtype)


def _smooth_warp(rng: np.random.Generator, size: int, amp: float, n_waves: int = 3):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    dx = np.zeros((size, size))
    dy = np.zeros((size, size))
    for _ in range(n_waves):
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        dx += np.sin(2 * np.pi * (fx * yy + fy * xx) + px)
        dy += np.sin(2 * np.pi * (fy * xx - fx * yy) + py)
    return amp * dx / n_waves, amp * dy / n_waves


def _region_field(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    size = cfg.base_size
    n_tissue = len(cfg.class_names) - 1
    jitter, r_min, r_max, warp = cfg.tissue_blob_params

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    wx, wy = _smooth_warp(rng, size, warp)
    xw = xx + wx
    yw = yy + wy

    cx, cy = 0.5 + rng.uniform(-jitter, jitter, size=2)
    rx, ry = rng.uniform(r_min, r_max, size=2)
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = ((xw - cx) * c + (yw - cy) * s) / rx
    v = (-(xw - cx) * s + (yw - cy) * c) / ry
    tissue = u * u + v * v <= 1.0

    for _attempt in range(64):
        seeds = rng.uniform(0.0, 1.0, size=(cfg.n_region_seeds, 2))
        seed_cls = np.concatenate(
            [np.arange(1, n_tissue + 1), rng.integers(1, n_tissue + 1, cfg.n_region_seeds - n_tissue)]
        )
        rng.shuffle(seed_cls)
        best = np.full((size, size), np.inf)
        labels = np.zeros((size, size), dtype=np.uint8)
        for (sx, sy), k in zip(seeds, seed_cls):
            d = (xw - sx) ** 2 + (yw - sy) ** 2
            closer = d < best
            best[closer] = d[closer]
            labels[closer] = k
        labels[~tissue] = 0
        n_t = tissue.sum()
        shares = np.bincount(labels[tissue], minlength=n_tissue + 1)[1:] / max(n_t, 1)
        if shares.min() >= cfg.min_class_share:
            return labels
    raise ConfigError("could not draw a region layout with every class present")


def _render_high(cfg: SynthConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = cfg.base_size
    palette = np.asarray(cfg.class_palette, dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = palette[labels].copy()
    for k in range(len(cfg.class_names)):
        amp = cfg.texture_amp[k]
        if amp == 0:
            continue
        a, b = cfg.texture_dirs[k]
        phase = rng.uniform(0, 2 * np.pi)
        wave = amp * np.sin(2 * np.pi * cfg.texture_freq[k] * (a * xx + b * yy) + phase)
        mask = labels == k
        img[mask] += wave[mask][:, None]
    img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return to_uint8(img)


def synth_slide(cfg: SynthConfig, slide_id: str | None = None) -> SlidePyramid:
    """Generate a deterministic LOW/MID/HIGH pyramid from ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    labels_hi = _region_field(cfg, rng)
    raster_hi = _render_high(cfg, labels_hi, rng)

    raster_mid = box_downsample(raster_hi)
    labels_mid = majority_pool(labels_hi)
    raster_lo = box_downsample(raster_mid)
    labels_lo = majority_pool(labels_mid)
    levels = [
        Level(MagTag.LOW, raster_lo, labels_lo),
        Level(MagTag.MID, raster_mid, labels_mid),
        Level(MagTag.HIGH, raster_hi, labels_hi),
    ]
    pyr = SlidePyramid(
        slide_id=slide_id or f"slide_{cfg.seed:016x}",
        levels=levels,
        class_names=list(cfg.class_names),
        scale_factor=SCALE_FACTOR,
        seed=int(cfg.seed),
    )
    pyr.validate()
    return pyr


def class_shares(pyr: SlidePyramid, tag=MagTag.HIGH) -> np.ndarray:
    """Fraction of pixels per class at one level (sums to 1)."""
    labels = pyr.level(tag).labels
    counts = np.bincount(labels.ravel(), minlength=len(pyr.class_names))
    return counts / counts.sum()


# --- directory format -------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def _sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def save_slide(pyr: SlidePyramid, directory) -> Path:
    pyr.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for lv in pyr.levels:
        tag = lv.mag_tag.name.lower()
        raster_file, label_file = f"{tag}.ppm", f"{tag}_labels.pgm"
        raster_blob = netpbm.write(directory / raster_file, lv.raster)
        label_blob = netpbm.write(directory / label_file, lv.labels)
        entries.append(
            {
                "mag_tag": lv.mag_tag.name,
                "width": lv.width,
                "height": lv.height,
                "raster_file": raster_file,
                "label_file": label_file,
                "raster_sha256": _sha256(raster_blob),
                "label_sha256": _sha256(label_blob),
            }
        )
    manifest = {
        "slide_id": pyr.slide_id,
        "scale_factor": pyr.scale_factor,
        "class_names": list(pyr.class_names),
        "seed": pyr.seed,
        "levels": entries,
    }
    if pyr.meta:
        manifest["meta"] = pyr.meta
    path = directory / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _read_checked(directory: Path, fname: str, digest: str) -> np.ndarray:
    path = directory / fname
    if not path.is_file():
        raise FormatError(f"missing level file {fname} in {directory}")
    blob = path.read_bytes()
    try:
        arr = netpbm.decode(blob, name=fname)
    except netpbm.NetpbmError as exc:
        raise FormatError(str(exc)) from exc
    if _sha256(blob) != digest:
        raise FormatError(f"checksum mismatch for {fname}")
    return arr


def load_slide(directory) -> SlidePyramid:
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.is_file():
        raise FormatError(f"no {MANIFEST_NAME} in {directory}")
    try:
        manifest = json.loads(mpath.read_text())
        entries = manifest["levels"]
        class_names = list(manifest["class_names"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt manifest {mpath}: {exc}") from exc

    levels = []
    for i, e in enumerate(entries):
        try:
            tag = MagTag[e["mag_tag"]]
        except KeyError as exc:
            raise FormatError(f"bad mag_tag in level {i}") from exc
        raster = _read_checked(directory, e["raster_file"], e["raster_sha256"])
        labels = _read_checked(directory, e["label_file"], e["label_sha256"])
        if raster.ndim != 3 or labels.ndim != 2:
            raise FormatError(f"level {tag.name}: wrong file kinds")
        if raster.shape[:2] != (e["height"], e["width"]) or labels.shape != (e["height"], e["width"]):
            raise FormatError(f"level {tag.name}: dimensions disagree with manifest")
        levels.append(Level(tag, raster, labels))

    pyr = SlidePyramid(
        slide_id=manifest["slide_id"],
        levels=levels,
        class_names=class_names,
        scale_factor=int(manifest["scale_factor"]),
        seed=int(manifest.get("seed", 0)),
        meta=manifest.get("meta", {}),
    )
    try:
        pyr.validate()
    except ConfigError as exc:
        raise FormatError(f"{directory}: {exc}") from exc
    return pyr
