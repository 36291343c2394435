"""Teacher-student self-distillation with an EMA teacher.

In MAD mode the teacher sees a low-magnification context tile and the student
sees aligned tiles from the next level; BASELINE mode swaps in ordinary
random-resized crops of single tiles and keeps every other component.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, nnet
from .errors import ConfigError, FormatError, NumericalAbort
from .nnet import ViTConfig
from .tiler import Transition
from .views import (
    AugParams,
    TileStore,
    choose_source,
    sample_baseline_batch,
    sample_mad_batch,
    sample_standalone_batch,
)

log = logging.getLogger(__name__)

MODES = ("MAD", "BASELINE")


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_families: int = 16
    lr: float = 5e-4
    min_lr: float = 1e-6
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    tau_s: float = 0.1
    tau_t: float = 0.04
    center_momentum: float = 0.9
    ema_start: float = 0.99
    ema_end: float = 0.999
    mode: str = "MAD"
    rho: float = 0.2
    student_sees_globals: bool = False
    curriculum: str = "interleaved"
    freeze_prototypes_steps: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    aug: AugParams = field(default_factory=AugParams)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.batch_families < 1:
            raise ConfigError("batch_families must be at least 1")
        if not 0 < self.tau_t < self.tau_s:
            raise ConfigError("temperatures must satisfy 0 < tau_t < tau_s")
        for name in ("center_momentum", "ema_start", "ema_end", "rho", "warmup_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.curriculum not in ("interleaved", "staged"):
            raise ConfigError(f"unknown curriculum {self.curriculum!r}")
        self.aug.validate()

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["aug"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["aug"].items()}
        return d

    @classmethod
    def from_json(cls, d) -> "TrainConfig":
        d = dict(d)
        aug = d.pop("aug", None) or {}
        aug = AugParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in aug.items()})
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(aug=aug, **d)


@dataclass
class ModelState:
    student: dict
    teacher: dict
    center: np.ndarray
    step: int
    rng: np.random.Generator

    def check(self) -> None:
        if set(self.student) != set(self.teacher):
            raise ConfigError("student and teacher parameter names differ")
        for k in self.student:
            if self.student[k].shape != self.teacher[k].shape:
                raise ConfigError(f"student/teacher shape mismatch for {k}")
        if not np.all(np.isfinite(self.center)):
            raise ConfigError("non-finite center")


# --- objective --------------------------------------------------------------


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def teacher_probs(teacher_logits, center, tau_t):
    t = np.asarray(teacher_logits, dtype=np.float64)
    return np.exp(_log_softmax((t - np.asarray(center, dtype=np.float64)) / tau_t))


def mad_loss(teacher_logits, student_logits, center, tau_t: float, tau_s: float, skip_same: bool = False):
    """Cross-entropy of student softmax against centred, sharpened teacher.

    Shapes ``(G, K)`` / ``(S, K)`` for one batch, or ``(B, G, K)`` / ``(B, S, K)``
    for ``B`` batches (loss and gradient are then averaged over ``B``). The
    loss averages ``H(p_g, q_l)`` over all teacher/student pairs; with
    ``skip_same`` the pairs where student view ``g`` is teacher view ``g``
    are left out. Returns ``(loss, dloss/dstudent_logits)``; the teacher side
    is treated as constant.
    """
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    single = t.ndim == 2
    if single:
        t, s = t[None], s[None]
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s)) and np.all(np.isfinite(center))):
        raise NumericalAbort("non-finite logits or center in distillation loss")
    if tau_t <= 0 or tau_s <= 0:
        raise ConfigError("temperatures must be positive")
    B, G, K = t.shape
    S = s.shape[1]
    p = teacher_probs(t, center, tau_t)  # (B, G, K)
    logq = _log_softmax(s / tau_s)  # (B, S, K)
    mask = np.ones((G, S))
    if skip_same:
        for g in range(min(G, S)):
            mask[g, g] = 0.0
    n_pairs = mask.sum()
    # H[b, g, l] = -sum_k p[b, g, k] log q[b, l, k]
    H = -np.einsum("bgk,blk->bgl", p, logq)
    loss = float((H * mask).sum() / (n_pairs * B))
    q = np.exp(logq)
    # dH(p_g, q_l)/ds_l = (q_l - p_g) / tau_s
    w = mask.sum(axis=0)  # pairs per student view
    grad = (w[None, :, None] * q - np.einsum("gl,bgk->blk", mask, p)) / (tau_s * n_pairs * B)
    if single:
        grad = grad[0]
    return loss, grad


def update_center(center, teacher_logits, m: float):
    t = np.asarray(teacher_logits, dtype=np.float64).reshape(-1, np.shape(center)[-1])
    return m * np.asarray(center, dtype=np.float64) + (1.0 - m) * t.mean(axis=0)


def ema_update(teacher: dict, student: dict, lam: float) -> dict:
    """In-place ``teacher <- lam * teacher + (1 - lam) * student``; returns ``teacher``."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"EMA momentum {lam} outside [0, 1]")
    if set(teacher) != set(student):
        raise ConfigError("teacher/student parameter names differ")
    for k, t in teacher.items():
        s = student[k]
        if t.shape != s.shape:
            raise ConfigError(f"shape mismatch for {k}")
        if lam == 1.0:
            continue
        if lam == 0.0:
            t[...] = s
        else:
            t *= t.dtype.type(lam)
            t += t.dtype.type(1.0 - lam) * s
    return teacher


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(-(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1).mean())


# --- schedules / optimiser -------------------------------------------------


def cosine(start: float, end: float, step: int, total: int) -> float:
    if total <= 1:
        return end
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def lr_at(cfg: TrainConfig, step: int) -> float:
    warm = int(round(cfg.warmup_frac * cfg.steps))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    return cosine(cfg.lr, cfg.min_lr, step - warm, max(cfg.steps - warm, 1))


def ema_at(cfg: TrainConfig, step: int) -> float:
    return cosine(cfg.ema_start, cfg.ema_end, step, cfg.steps)


class AdamW:
    """Adam with decoupled weight decay on matrices only (not biases / norms)."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and not nnet.is_norm_or_bias(k) and p.ndim > 1:
                p -= p.dtype.type(lr * self.wd) * p
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


# --- training ---------------------------------------------------------------


def init_state(vit_cfg: ViTConfig, seed: int) -> ModelState:
    ss = np.random.SeedSequence(seed)
    init_seed, loop_seed = ss.spawn(2)
    student = nnet.init_params(vit_cfg, seed=int(init_seed.generate_state(1)[0]))
    teacher = copy.deepcopy(student)
    return ModelState(
        student=student,
        teacher=teacher,
        center=np.zeros(vit_cfg.n_prototypes),
        step=0,
        rng=np.random.default_rng(loop_seed),
    )


def draw_batches(store: TileStore, cfg: TrainConfig, rng, step: int) -> list:
    """One step's view batches. In MAD mode a single source (transition or
    standalone) is drawn per step and shared by all ``batch_families``."""
    if cfg.mode == "BASELINE":
        return [sample_baseline_batch(store, rng, cfg.aug) for _ in range(cfg.batch_families)]
    src = choose_source(rng, cfg.rho, step, cfg.steps, cfg.curriculum)
    if src != Transition.NONE and not store.families[src]:
        src = Transition.NONE
    if src == Transition.NONE:
        return [sample_standalone_batch(store, rng, cfg.aug) for _ in range(cfg.batch_families)]
    return [sample_mad_batch(store, src, rng, cfg.aug) for _ in range(cfg.batch_families)]


TRACE_FIELDS = ("step", "loss", "lambda", "teacher_entropy", "center_l2")


def train_step(state: ModelState, opt: AdamW, store: TileStore, vit_cfg: ViTConfig, cfg: TrainConfig) -> dict:
    step = state.step
    batches = draw_batches(store, cfg, state.rng, step)
    K = vit_cfg.n_prototypes
    B = len(batches)
    tx = np.concatenate([b.teacher_views for b in batches])
    if cfg.student_sees_globals:
        sx = np.concatenate([np.concatenate([b.teacher_views, b.student_views]) for b in batches])
    else:
        sx = np.concatenate([b.student_views for b in batches])

    t_emb, _ = nnet.forward(state.teacher, tx, vit_cfg, record=False)
    t_logits = nnet.head_forward(state.teacher, t_emb).reshape(B, -1, K)
    s_emb, tape = nnet.forward(state.student, sx, vit_cfg)
    s_logits = nnet.head_forward(state.student, s_emb, tape).reshape(B, -1, K)

    try:
        loss, dlogits = mad_loss(
            t_logits, s_logits, state.center, cfg.tau_t, cfg.tau_s, skip_same=cfg.student_sees_globals
        )
        if not math.isfinite(loss):
            raise NumericalAbort("non-finite loss")
    except NumericalAbort as exc:
        exc.diagnostic.update(
            step=step,
            seed_traces=[b.seed_trace for b in batches],
            modes=[b.mode.value for b in batches],
            transitions=[b.transition.value for b in batches],
            slides=[b.slide_id for b in batches],
        )
        raise

    grads = nnet.backward(tape, dlogits.reshape(-1, K).astype(np.float32))
    if step < cfg.freeze_prototypes_steps:
        grads["head.prototypes"][...] = 0.0
    opt.step(state.student, grads, lr_at(cfg, step))
    nnet.normalize_prototypes(state.student)

    lam = ema_at(cfg, step)
    ema_update(state.teacher, state.student, lam)
    p = teacher_probs(t_logits, state.center, cfg.tau_t)
    state.center = update_center(state.center, t_logits, cfg.center_momentum)
    state.step += 1
    return {
        "step": step,
        "loss": loss,
        "lambda": lam,
        "teacher_entropy": entropy(p),
        "center_l2": float(np.linalg.norm(state.center)),
    }


def train(store: TileStore, vit_cfg: ViTConfig, cfg: TrainConfig, checkpoint_dir=None, meta=None):
    """Run ``cfg.steps`` steps from a fresh initialisation.

    Returns ``(state, trace)`` where ``trace`` holds one dict per step.
    """
    vit_cfg.validate(len(store.manifest.class_names))
    cfg.validate()
    if vit_cfg.image_px != store.tile_px:
        raise ConfigError(f"image_px {vit_cfg.image_px} != manifest tile_px {store.tile_px}")
    state = init_state(vit_cfg, cfg.seed)
    opt = AdamW(state.student, betas=cfg.betas, weight_decay=cfg.weight_decay)
    trace = []
    for _ in range(cfg.steps):
        row = train_step(state, opt, store, vit_cfg, cfg)
        trace.append(row)
        if row["step"] % 100 == 0:
            log.info("step %d loss %.4f H_t %.3f", row["step"], row["loss"], row["teacher_entropy"])
        if checkpoint_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_state(state, vit_cfg, Path(checkpoint_dir) / f"step_{state.step:06d}.madc", meta)
    return state, trace


# --- persistence ------------------------------------------------------------


def state_tensors(state: ModelState) -> dict[str, np.ndarray]:
    out = {f"student.{k}": v for k, v in state.student.items()}
    out.update({f"teacher.{k}": v for k, v in state.teacher.items()})
    out["center"] = np.asarray(state.center, dtype=np.float32)
    return out


def save_state(state: ModelState, vit_cfg: ViTConfig, path, meta: dict | None = None) -> None:
    sidecar = {
        "vit": vit_cfg.to_json(),
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
    }
    if meta:
        sidecar.update(meta)
    checkpoint.save(path, state_tensors(state), sidecar)


def load_state(path) -> tuple[ModelState, ViTConfig, dict]:
    tensors, meta = checkpoint.load(path)
    if "vit" not in meta:
        raise FormatError(f"{path}: sidecar without ViT config")
    vit_cfg = ViTConfig.from_json(meta["vit"])
    student = {k[len("student.") :]: v for k, v in tensors.items() if k.startswith("student.")}
    teacher = {k[len("teacher.") :]: v for k, v in tensors.items() if k.startswith("teacher.")}
    try:
        nnet.check_params(student, vit_cfg)
        nnet.check_params(teacher, vit_cfg)
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    rng = np.random.default_rng()
    if "rng_state" in meta:
        rng.bit_generator.state = meta["rng_state"]
    state = ModelState(
        student=student,
        teacher=teacher,
        center=tensors.get("center", np.zeros(vit_cfg.n_prototypes, dtype=np.float32)).astype(np.float64),
        step=int(meta.get("step", 0)),
        rng=rng,
    )
    return state, vit_cfg, meta


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in TRACE_FIELDS[1:]])
