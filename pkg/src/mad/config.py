"""Run configuration: JSON file with full defaulting and a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from . import __version__
from .distill import MODES, TrainConfig
from .errors import ConfigError
from .evalsuite.evaluate import EvalConfig
from .nnet import ViTConfig
from .slidegen import SynthConfig
from .tiler import Caps

SECTIONS = ("seed", "mode", "out", "synth", "tiling", "train", "eval")


@dataclass
class TilingConfig:
    tile_px: int = 32
    caps: dict = field(default_factory=lambda: {"aligned": {}, "standalone": {}})
    n_test: int = 2
    split: dict | None = None  # explicit {"TRAIN": [...], "TEST": [...]} overrides n_test
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "MAD"
    out: str = "mad_run"
    n_slides: int = 10
    synth: SynthConfig = field(default_factory=SynthConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- derived views ---------------------------------------------------

    @property
    def slide_ids(self) -> list[str]:
        return [f"slide_{i:02d}" for i in range(self.n_slides)]

    def split_assignment(self) -> dict:
        if self.tiling.split:
            return {k: list(v) for k, v in self.tiling.split.items()}
        ids = self.slide_ids
        cut = len(ids) - self.tiling.n_test
        return {"TRAIN": ids[:cut], "TEST": ids[cut:]}

    def train_config(self) -> TrainConfig:
        cfg = copy.deepcopy(self.train)
        cfg.seed, cfg.mode = self.seed, self.mode
        return cfg

    def eval_config(self) -> EvalConfig:
        cfg = copy.deepcopy(self.eval)
        cfg.seed = self.seed
        return cfg

    def run_name(self) -> str:
        return f"{self.mode.lower()}-seed{self.seed}"

    # -- validation / serialisation ---------------------------------------

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_slides < 2:
            raise ConfigError("need at least two slides (one TRAIN, one TEST)")
        self.synth.validate()
        if self.synth.tile_px != self.tiling.tile_px:
            raise ConfigError("synth.tile_px and tiling.tile_px differ")
        if self.vit.image_px != self.tiling.tile_px:
            raise ConfigError(f"train.vit.image_px {self.vit.image_px} != tile_px {self.tiling.tile_px}")
        if not self.tiling.split and not 1 <= self.tiling.n_test < self.n_slides:
            raise ConfigError("tiling.n_test must leave at least one TRAIN and one TEST slide")
        Caps.from_json(self.tiling.caps)
        self.vit.validate(len(self.synth.class_names))
        self.train_config().validate()
        self.eval.validate()

    def to_json(self) -> dict:
        synth = asdict(self.synth)
        synth = {k: [list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, tuple) else v
                 for k, v in synth.items()}
        train = self.train.to_json()
        train.pop("seed")
        train.pop("mode")
        train["vit"] = self.vit.to_json()
        return {
            "seed": self.seed,
            "mode": self.mode,
            "out": self.out,
            "synth": {"n_slides": self.n_slides, **synth},
            "tiling": asdict(self.tiling),
            "train": train,
            "eval": self.eval.to_json(),
        }

    def hash(self) -> str:
        body = self.to_json()
        body.pop("out")
        blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed, "tool_version": __version__}


def _reject_unknown(d: dict, allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(d, SECTIONS, "config")
    base = RunConfig()
    try:
        synth_d = dict(d.get("synth") or {})
        n_slides = int(synth_d.pop("n_slides", base.n_slides))
        _reject_unknown(synth_d, SynthConfig.__dataclass_fields__, "synth")
        synth = SynthConfig(**{k: tuple(tuple(x) if isinstance(x, list) else x for x in v)
                               if isinstance(v, list) else v for k, v in synth_d.items()})

        tiling_d = dict(d.get("tiling") or {})
        _reject_unknown(tiling_d, TilingConfig.__dataclass_fields__, "tiling")
        tiling = TilingConfig(**tiling_d)
        if "tile_px" in tiling_d and "tile_px" not in synth_d:
            synth.tile_px = tiling.tile_px

        train_d = dict(d.get("train") or {})
        vit_d = dict(train_d.pop("vit", None) or {})
        _reject_unknown(vit_d, ViTConfig.__dataclass_fields__, "train.vit")
        vit = ViTConfig(**vit_d)
        if "image_px" not in vit_d:
            vit.image_px = tiling.tile_px
        for k in ("seed", "mode"):
            if k in train_d:
                raise ConfigError(f"train.{k} is set at top level of the config")
        train = TrainConfig.from_json(train_d)

        cfg = RunConfig(
            seed=int(d.get("seed", base.seed)),
            mode=str(d.get("mode", base.mode)).upper(),
            out=str(d.get("out", base.out)),
            n_slides=n_slides,
            synth=synth,
            tiling=tiling,
            train=train,
            vit=vit,
            eval=EvalConfig.from_json(d.get("eval")),
        )
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    cfg.validate()
    return cfg


def load(path, seed: int | None = None, mode: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if seed is not None:
        d["seed"] = seed
    if mode is not None:
        d["mode"] = mode
    return from_dict(d)


def bundled(name: str = "desk.json") -> Path:
    """Path of a config shipped with the package."""
    return Path(str(resources.files("mad") / "configs" / name))
