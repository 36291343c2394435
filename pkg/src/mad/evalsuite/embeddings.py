"""Frozen CLS embeddings and the ``MADE`` file format.

``MADE`` layout: magic, u32 version, u32 row count N, u32 dim D, then N*D
little-endian float32 values row-major. Row metadata lives next to it in
``<stem>.meta.jsonl`` and run information in ``<stem>.info.json``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, FormatError
from ..nnet import ViTConfig, embed
from ..slidegen import MagTag
from ..tiler import Kind, Split, TileIndex, TileManifest, TileRecord, extract_pixels

MAGIC = b"MADE"
VERSION = 1
CHUNK = 64


class Net(str, enum.Enum):
    TEACHER = "TEACHER"
    STUDENT = "STUDENT"


@dataclass
class EmbeddingSet:
    rows: np.ndarray
    meta: list
    checkpoint_id: str = ""
    net: Net = Net.TEACHER
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise ConfigError(f"embedding rows must be 2-D, got shape {self.rows.shape}")
        if len(self.meta) != self.rows.shape[0]:
            raise ConfigError(f"{self.rows.shape[0]} rows but {len(self.meta)} meta entries")
        self.net = Net(self.net)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.meta], dtype=np.int64)

    @property
    def keys(self) -> list:
        return [r.key for r in self.meta]

    @property
    def provenance(self) -> list:
        """Sorted distinct ``(level, split)`` tags of the rows."""
        return sorted({(r.level.name, r.split.value) for r in self.meta})

    def subset(self, mask) -> "EmbeddingSet":
        idx = np.flatnonzero(np.asarray(mask, dtype=bool))
        return EmbeddingSet(self.rows[idx], [self.meta[i] for i in idx], self.checkpoint_id, self.net, dict(self.info))

    def where(self, levels=None, splits=None, kinds=None) -> "EmbeddingSet":
        levels = None if levels is None else {MagTag[l] if isinstance(l, str) else MagTag(l) for l in levels}
        splits = None if splits is None else {Split(s) for s in splits}
        kinds = None if kinds is None else {Kind(k) for k in kinds}
        mask = [
            (levels is None or r.level in levels)
            and (splits is None or r.split in splits)
            and (kinds is None or r.kind in kinds)
            for r in self.meta
        ]
        return self.subset(mask)

    def check_manifest(self, manifest: TileManifest) -> None:
        for rec in self.meta:
            if not manifest.find(rec.key):
                raise ConfigError(f"embedding row {rec.key} is not in the manifest")


def checkpoint_id(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def embed_images(params: dict, images: np.ndarray, cfg: ViTConfig, threads: int = 1) -> np.ndarray:
    """CLS embeddings of ``(N, P, P, 3)`` images.

    Work is cut into fixed chunks of ``CHUNK`` rows whatever ``threads`` is,
    so the output does not depend on the worker count.
    """
    n = images.shape[0]
    if n == 0:
        return np.zeros((0, cfg.embed_dim), dtype=np.float32)
    starts = range(0, n, CHUNK)
    job = lambda s: embed(params, images[s : s + CHUNK], cfg, chunk=CHUNK)
    if threads <= 1:
        parts = [job(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, starts))
    return np.concatenate(parts).astype(np.float32)


def embed_records(params, cfg: ViTConfig, slides: dict, records: list, threads: int = 1) -> np.ndarray:
    if not records:
        return np.zeros((0, cfg.embed_dim), dtype=np.float32)
    for rec in records:
        if rec.slide_id not in slides:
            raise ConfigError(f"slide {rec.slide_id} not loaded")
    imgs = np.stack([extract_pixels(slides[r.slide_id], r) for r in records])
    if imgs.shape[1] != cfg.image_px:
        raise ConfigError(f"tiles are {imgs.shape[1]} px but the network expects {cfg.image_px}")
    return embed_images(params, imgs, cfg, threads)


def embed_tiles(
    params: dict,
    cfg: ViTConfig,
    manifest: TileManifest,
    slides,
    levels=None,
    splits=None,
    kinds=None,
    net=Net.TEACHER,
    ckpt_id: str = "",
    threads: int = 1,
) -> EmbeddingSet:
    """Un-augmented embeddings of the manifest records passing the filter,
    one row per distinct tile, in manifest order."""
    slides = slides if isinstance(slides, dict) else {s.slide_id: s for s in slides}
    recs = manifest.select(levels, splits, kinds, unique=True)
    rows = embed_records(params, cfg, slides, recs, threads)
    return EmbeddingSet(rows, recs, ckpt_id, net)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.jsonl")


def info_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".info.json")


def encode_rows(rows: np.ndarray) -> bytes:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    return MAGIC + struct.pack("<III", VERSION, rows.shape[0], rows.shape[1]) + rows.tobytes()


def decode_rows(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise FormatError(f"{name}: truncated header")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise FormatError(f"{name}: unsupported embedding version {version}")
    if len(blob) != 16 + 4 * n * d:
        raise FormatError(f"{name}: expected {16 + 4 * n * d} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(n, d).astype(np.float32)


def _meta_line(rec: TileRecord) -> str:
    d = {
        "slide": rec.slide_id,
        "level": rec.level.name,
        "coords": list(rec.index.coords),
        "label": rec.label,
        "split": rec.split.value,
        "kind": rec.kind.value,
        "x": rec.x,
        "y": rec.y,
        "tile_px": rec.tile_px,
    }
    return json.dumps(d, sort_keys=True)


def _meta_record(d: dict) -> TileRecord:
    return TileRecord(
        index=TileIndex(MagTag[d["level"]], tuple(d["coords"])),
        slide_id=str(d["slide"]),
        x=int(d.get("x", 0)),
        y=int(d.get("y", 0)),
        tile_px=int(d.get("tile_px", 0)),
        label=int(d["label"]),
        split=Split(d["split"]),
        kind=Kind(d["kind"]),
    )


def write_embeddings(es: EmbeddingSet, path, info: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_rows(es.rows))
    meta_path(path).write_text("".join(_meta_line(r) + "\n" for r in es.meta))
    body = {"checkpoint_id": es.checkpoint_id, "net": es.net.value, "provenance": es.provenance}
    body.update(es.info)
    body.update(info or {})
    info_path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def read_embeddings(path) -> EmbeddingSet:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"embedding file {path} not found (run `mad embed`)")
    rows = decode_rows(path.read_bytes(), str(path))
    mp = meta_path(path)
    if not mp.is_file():
        raise FormatError(f"missing row metadata {mp}")
    meta = [_meta_record(json.loads(line)) for line in mp.read_text().splitlines() if line.strip()]
    if len(meta) != rows.shape[0]:
        raise FormatError(f"{path}: {rows.shape[0]} rows but {len(meta)} metadata lines")
    ip = info_path(path)
    info = json.loads(ip.read_text()) if ip.is_file() else {}
    info.pop("provenance", None)
    return EmbeddingSet(rows, meta, info.pop("checkpoint_id", ""), info.pop("net", Net.TEACHER), info)


__all__ = [
    "EmbeddingSet",
    "Net",
    "checkpoint_id",
    "embed_images",
    "embed_records",
    "embed_tiles",
    "read_embeddings",
    "write_embeddings",
]
