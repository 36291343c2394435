"""Small vision transformer with register tokens and a prototype head.

Everything is plain numpy: ``forward`` records a :class:`Tape`, ``backward``
replays it in reverse to produce exact gradients for every parameter (and
optionally the input). Computation runs in the dtype of the parameters, so a
float64 copy of the parameters gives a float64 network for gradient checking.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError

LN_EPS = 1e-6
NORM_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass
class ViTConfig:
    image_px: int = 32
    patch_px: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    n_registers: int = 4
    head_hidden: int = 128
    head_bottleneck: int = 32
    n_prototypes: int = 64

    def validate(self, n_classes: int | None = None) -> None:
        if self.image_px % self.patch_px:
            raise ConfigError("image_px must be divisible by patch_px")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if min(self.embed_dim, self.heads, self.head_hidden, self.head_bottleneck, self.n_prototypes) < 1:
            raise ConfigError("dimensions must be positive")
        if self.depth < 0 or self.n_registers < 0:
            raise ConfigError("depth and n_registers must be non-negative")
        if n_classes is not None and self.n_prototypes < n_classes:
            raise ConfigError("n_prototypes must be at least the number of classes")

    @property
    def n_patches(self) -> int:
        return (self.image_px // self.patch_px) ** 2

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1 + self.n_registers

    @property
    def patch_dim(self) -> int:
        return self.patch_px * self.patch_px * 3

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d) -> "ViTConfig":
        return cls(**{k: int(v) for k, v in d.items() if k in cls.__dataclass_fields__})


def param_shapes(cfg: ViTConfig) -> dict[str, tuple]:
    D = cfg.embed_dim
    F = cfg.mlp_ratio * D
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, D),
        "patch_embed.bias": (D,),
        "pos_embed": (cfg.n_patches, D),
        "cls_token": (D,),
        "reg_tokens": (cfg.n_registers, D),
        "norm.weight": (D,),
        "norm.bias": (D,),
        "head.lin1.weight": (D, cfg.head_hidden),
        "head.lin1.bias": (cfg.head_hidden,),
        "head.lin2.weight": (cfg.head_hidden, cfg.head_hidden),
        "head.lin2.bias": (cfg.head_hidden,),
        "head.lin3.weight": (cfg.head_hidden, cfg.head_bottleneck),
        "head.lin3.bias": (cfg.head_bottleneck,),
        "head.prototypes": (cfg.n_prototypes, cfg.head_bottleneck),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "ln1.weight": (D,),
                p + "ln1.bias": (D,),
                p + "attn.qkv.weight": (D, 3 * D),
                p + "attn.qkv.bias": (3 * D,),
                p + "attn.proj.weight": (D, D),
                p + "attn.proj.bias": (D,),
                p + "ln2.weight": (D,),
                p + "ln2.bias": (D,),
                p + "mlp.fc1.weight": (D, F),
                p + "mlp.fc1.bias": (F,),
                p + "mlp.fc2.weight": (F, D),
                p + "mlp.fc2.bias": (D,),
            }
        )
    return dict(sorted(shapes.items()))


def is_norm_or_bias(name: str) -> bool:
    return name.endswith(".bias") or ".ln" in name or name.startswith("norm.")


def normalize_prototypes(params: dict) -> None:
    P = params["head.prototypes"]
    norms = np.sqrt((P.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    P[...] = (P / np.maximum(norms, NORM_EPS)).astype(P.dtype)


def init_params(cfg: ViTConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight") and (".ln" in name or name.startswith("norm.")):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        elif len(shape) == 2 and name.endswith(".weight"):
            # fan-in scaling: a fixed 0.02 leaves a 64-wide net close to constant
            std = 1.0 / np.sqrt(shape[0])
            arr = np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)
        else:
            arr = np.clip(rng.normal(0.0, 0.02, size=shape), -0.04, 0.04)
        params[name] = arr.astype(dtype)
    params["head.prototypes"] = rng.normal(size=params["head.prototypes"].shape).astype(dtype)
    normalize_prototypes(params)
    return params


def cast_params(params: dict, dtype) -> dict:
    return {k: np.array(v, dtype=dtype) for k, v in params.items()}


def check_params(params: dict, cfg: ViTConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter names mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(f"{name}: shape {params[name].shape}, expected {shape}")


# --- primitives -------------------------------------------------------------


def _gelu(x):
    t = x * x
    t *= _GELU_A
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t


def _gelu_grad(x, t):
    x2 = x * x
    x2 *= 3.0 * _GELU_A
    x2 += 1.0
    x2 *= _GELU_C * 0.5
    x2 *= x
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    x2 *= sech2
    x2 += 0.5
    x2 += 0.5 * t
    return x2


def _acc(dtype):
    # reductions accumulate in at least 64 bits
    return np.promote_types(dtype, np.float64)


def _layernorm(x, w, b):
    acc = _acc(x.dtype)
    mu = x.mean(axis=-1, keepdims=True, dtype=acc)
    xc = x - mu.astype(x.dtype)
    var = (xc.astype(acc) ** 2).mean(axis=-1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + LN_EPS)).astype(x.dtype)
    xhat = xc * rstd
    return xhat * w + b, (xhat, rstd)


def _layernorm_back(dy, cache, w):
    xhat, rstd = cache
    red = tuple(range(dy.ndim - 1))
    dw = (dy * xhat).sum(axis=red)
    db = dy.sum(axis=red)
    dxhat = dy * w
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return rstd * (dxhat - m1 - xhat * m2), dw, db


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def patchify(x: np.ndarray, patch_px: int) -> np.ndarray:
    """(N, S, S, 3) -> (N, n_patches, patch_px*patch_px*3), patches row-major."""
    n, s = x.shape[0], x.shape[1]
    g = s // patch_px
    x = x.reshape(n, g, patch_px, g, patch_px, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, g * g, patch_px * patch_px * 3)


def unpatchify(p: np.ndarray, patch_px: int, image_px: int) -> np.ndarray:
    n = p.shape[0]
    g = image_px // patch_px
    x = p.reshape(n, g, g, patch_px, patch_px, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, image_px, image_px, 3)


# --- forward / backward -----------------------------------------------------


@dataclass
class Tape:
    cfg: ViTConfig
    params: dict
    x: np.ndarray
    patches: np.ndarray = None
    blocks: list = field(default_factory=list)
    final: tuple = None
    head: dict = None
    attn: list = field(default_factory=list)


def _check_input(x: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (cfg.image_px, cfg.image_px, 3):
        raise ConfigError(f"expected tiles of shape (N, {cfg.image_px}, {cfg.image_px}, 3), got {x.shape}")
    return x


def forward(params: dict, x: np.ndarray, cfg: ViTConfig, record: bool = True):
    """Backbone forward. Returns ``(cls_embedding (N, D), tape)``.

    With ``record=False`` the tape is ``None`` and no activations are kept.
    """
    x = _check_input(x, cfg)
    dt = params["patch_embed.weight"].dtype
    x = x.astype(dt, copy=False)
    n = x.shape[0]
    D, H, R = cfg.embed_dim, cfg.heads, cfg.n_registers
    dh = D // H
    T = cfg.seq_len
    scale = dt.type(1.0 / math.sqrt(dh))

    patches = patchify(x, cfg.patch_px)
    emb = patches @ params["patch_embed.weight"] + params["patch_embed.bias"] + params["pos_embed"]
    z = np.empty((n, T, D), dtype=dt)
    z[:, 0] = params["cls_token"]
    z[:, 1 : 1 + R] = params["reg_tokens"]
    z[:, 1 + R :] = emb

    tape = Tape(cfg, params, x, patches) if record else None
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        # only the CLS row of the last block reaches the output
        nq = 1 if i == cfg.depth - 1 else T
        Wqkv, bqkv = params[p + "attn.qkv.weight"], params[p + "attn.qkv.bias"]
        a, ln1 = _layernorm(z, params[p + "ln1.weight"], params[p + "ln1.bias"])
        q = (a[:, :nq] @ Wqkv[:, :D] + bqkv[:D]).reshape(n, nq, H, dh).transpose(0, 2, 1, 3)
        kv = (a @ Wqkv[:, D:] + bqkv[D:]).reshape(n, T, 2, H, dh).transpose(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        A = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        ctx = (A @ v).transpose(0, 2, 1, 3).reshape(n, nq, D)
        h = z[:, :nq] + ctx @ params[p + "attn.proj.weight"] + params[p + "attn.proj.bias"]
        c, ln2 = _layernorm(h, params[p + "ln2.weight"], params[p + "ln2.bias"])
        f = c @ params[p + "mlp.fc1.weight"] + params[p + "mlp.fc1.bias"]
        g, t = _gelu(f)
        out = h + g @ params[p + "mlp.fc2.weight"] + params[p + "mlp.fc2.bias"]
        if record:
            tape.blocks.append(dict(nq=nq, ln1=ln1, a=a, q=q, k=k, v=v, A=A, ctx=ctx, ln2=ln2, c=c, f=f, t=t, g=g))
            tape.attn.append(A)
        z = out

    y, lnf = _layernorm(z[:, 0], params["norm.weight"], params["norm.bias"])
    if record:
        tape.final = lnf
    return y, tape


def head_forward(params: dict, emb: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    """Projection head: MLP -> L2 normalise -> cosine against prototypes."""
    a1 = emb @ params["head.lin1.weight"] + params["head.lin1.bias"]
    h1, t1 = _gelu(a1)
    a2 = h1 @ params["head.lin2.weight"] + params["head.lin2.bias"]
    h2, t2 = _gelu(a2)
    b = h2 @ params["head.lin3.weight"] + params["head.lin3.bias"]
    norm = np.sqrt((b.astype(_acc(b.dtype)) ** 2).sum(axis=-1, keepdims=True)).astype(b.dtype)
    norm_c = np.maximum(norm, b.dtype.type(NORM_EPS))
    u = b / norm_c
    logits = u @ params["head.prototypes"].T
    if tape is not None:
        tape.head = dict(emb=emb, a1=a1, t1=t1, h1=h1, a2=a2, t2=t2, h2=h2, u=u, norm=norm, norm_c=norm_c)
    return logits


def _head_back(tape: Tape, dlogits, grads):
    P = tape.params
    hc = tape.head
    u = hc["u"]
    grads["head.prototypes"] = dlogits.T @ u
    du = dlogits @ P["head.prototypes"]
    proj = (du * u).sum(axis=-1, keepdims=True)
    clipped = hc["norm"] <= NORM_EPS
    db = np.where(clipped, du, du - u * proj) / hc["norm_c"]
    grads["head.lin3.weight"] = hc["h2"].T @ db
    grads["head.lin3.bias"] = db.sum(axis=0)
    dh2 = db @ P["head.lin3.weight"].T
    da2 = dh2 * _gelu_grad(hc["a2"], hc["t2"])
    grads["head.lin2.weight"] = hc["h1"].T @ da2
    grads["head.lin2.bias"] = da2.sum(axis=0)
    dh1 = da2 @ P["head.lin2.weight"].T
    da1 = dh1 * _gelu_grad(hc["a1"], hc["t1"])
    grads["head.lin1.weight"] = hc["emb"].T @ da1
    grads["head.lin1.bias"] = da1.sum(axis=0)
    return da1 @ P["head.lin1.weight"].T


def backward(tape: Tape, upstream, grad_embedding=None, with_input: bool = False):
    """Reverse pass through head and backbone.

    ``upstream`` is dL/dlogits ``(N, K)`` (or ``None`` to skip the head);
    ``grad_embedding`` optionally adds dL/d(cls embedding). Returns the gradient
    dict, plus dL/dx when ``with_input`` is set.
    """
    if tape is None or tape.final is None:
        raise ConfigError("backward needs a tape recorded by forward(record=True)")
    cfg, P = tape.cfg, tape.params
    n = tape.x.shape[0]
    D, H, R = cfg.embed_dim, cfg.heads, cfg.n_registers
    dh = D // H
    T = cfg.seq_len
    dt = P["patch_embed.weight"].dtype
    scale = dt.type(1.0 / math.sqrt(dh))
    grads: dict[str, np.ndarray] = {}

    demb = np.zeros((n, D), dtype=dt)
    if upstream is not None:
        if tape.head is None:
            raise ConfigError("tape has no head activations; call head_forward(params, emb, tape)")
        upstream = np.asarray(upstream, dtype=dt)
        if upstream.shape != (n, cfg.n_prototypes):
            raise ConfigError(f"upstream grad shape {upstream.shape}, expected {(n, cfg.n_prototypes)}")
        demb = demb + _head_back(tape, upstream, grads)
    else:
        for name in param_shapes(cfg):
            if name.startswith("head."):
                grads[name] = np.zeros_like(P[name])
    if grad_embedding is not None:
        demb = demb + np.asarray(grad_embedding, dtype=dt)

    dcls, grads["norm.weight"], grads["norm.bias"] = _layernorm_back(demb, tape.final, P["norm.weight"])
    dz = dcls[:, None, :]

    for i in reversed(range(cfg.depth)):
        p = f"blocks.{i}."
        c = tape.blocks[i]
        nq = c["nq"]
        Wqkv = P[p + "attn.qkv.weight"]
        # MLP branch; dz is the gradient w.r.t. this block's (n, nq, D) output
        F = c["g"].shape[-1]
        grads[p + "mlp.fc2.weight"] = c["g"].reshape(-1, F).T @ dz.reshape(-1, D)
        grads[p + "mlp.fc2.bias"] = dz.sum(axis=(0, 1))
        df = _gelu_grad(c["f"], c["t"])
        df *= dz @ P[p + "mlp.fc2.weight"].T
        grads[p + "mlp.fc1.weight"] = c["c"].reshape(-1, D).T @ df.reshape(-1, F)
        grads[p + "mlp.fc1.bias"] = df.sum(axis=(0, 1))
        dc = df @ P[p + "mlp.fc1.weight"].T
        dhid, grads[p + "ln2.weight"], grads[p + "ln2.bias"] = _layernorm_back(dc, c["ln2"], P[p + "ln2.weight"])
        dhid += dz
        # attention branch
        grads[p + "attn.proj.weight"] = c["ctx"].reshape(-1, D).T @ dhid.reshape(-1, D)
        grads[p + "attn.proj.bias"] = dhid.sum(axis=(0, 1))
        dctx = (dhid @ P[p + "attn.proj.weight"].T).reshape(n, nq, H, dh).transpose(0, 2, 1, 3)
        A = c["A"]
        dA = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ dctx
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dq = (dS @ c["k"]).transpose(0, 2, 1, 3).reshape(n, nq, D)
        dk = dS.transpose(0, 1, 3, 2) @ c["q"]
        dkv = np.stack([dk, dv]).transpose(1, 3, 0, 2, 4).reshape(n, T, 2 * D)
        a = c["a"]
        dW = np.empty_like(Wqkv)
        dW[:, :D] = a[:, :nq].reshape(-1, D).T @ dq.reshape(-1, D)
        dW[:, D:] = a.reshape(-1, D).T @ dkv.reshape(-1, 2 * D)
        grads[p + "attn.qkv.weight"] = dW
        # softmax rows are invariant to a shared key offset: that block is exactly zero
        grads[p + "attn.qkv.bias"] = np.concatenate(
            [dq.sum(axis=(0, 1)), np.zeros(D, dtype=dt), dv.sum(axis=(0, 2)).reshape(D)]
        )
        da = dkv @ Wqkv[:, D:].T
        da[:, :nq] += dq @ Wqkv[:, :D].T
        dx, grads[p + "ln1.weight"], grads[p + "ln1.bias"] = _layernorm_back(da, c["ln1"], P[p + "ln1.weight"])
        dx[:, :nq] += dhid
        dz = dx

    if dz.shape[1] != T:  # depth == 0: only the CLS row carries gradient
        full = np.zeros((n, T, D), dtype=dt)
        full[:, :1] = dz
        dz = full
    grads["cls_token"] = dz[:, 0].sum(axis=0)
    grads["reg_tokens"] = dz[:, 1 : 1 + R].sum(axis=0)
    demb_tok = dz[:, 1 + R :]
    grads["pos_embed"] = demb_tok.sum(axis=0)
    grads["patch_embed.bias"] = demb_tok.sum(axis=(0, 1))
    grads["patch_embed.weight"] = tape.patches.reshape(-1, cfg.patch_dim).T @ demb_tok.reshape(-1, D)
    grads = dict(sorted(grads.items()))
    if with_input:
        dpatch = demb_tok @ P["patch_embed.weight"].T
        return grads, unpatchify(dpatch, cfg.patch_px, cfg.image_px)
    return grads


def embed(params: dict, x: np.ndarray, cfg: ViTConfig, chunk: int = 64) -> np.ndarray:
    """CLS embeddings for many tiles, in fixed-size chunks (no tape)."""
    x = _check_input(x, cfg)
    out = [forward(params, x[i : i + chunk], cfg, record=False)[0] for i in range(0, len(x), chunk)]
    dim = cfg.embed_dim
    return np.concatenate(out) if out else np.zeros((0, dim), dtype=params["cls_token"].dtype)


# --- gradient verification --------------------------------------------------


def _random_params(cfg: ViTConfig, rng: np.random.Generator) -> dict:
    params = init_params(cfg, seed=int(rng.integers(2**32)), dtype=np.float64)
    for name, arr in params.items():
        if name == "head.prototypes":
            continue
        # move every tensor off its structured init so no gradient is trivially zero
        if arr.ndim == 2 and name.endswith(".weight"):
            arr += rng.normal(0.0, 0.5 / math.sqrt(arr.shape[0]), size=arr.shape)
        else:
            arr += rng.normal(0.0, 0.1, size=arr.shape)
    return params


def grad_check(
    cfg: ViTConfig | None = None,
    seed: int = 0,
    n_probe_params: int = 200,
    dtype=np.float64,
    step: float = 1e-5,
    batch: int = 1,
    fd_dtype=np.longdouble,
) -> float:
    """Max relative error between ``backward`` and central differences.

    Random parameters and inputs; the scalar loss is a fixed random linear
    functional of the prototype logits. Coordinates are sampled uniformly over
    the pooled parameter vector. The analytic pass runs in ``dtype``; the
    finite differences run in ``fd_dtype`` (x87 extended precision by default,
    so round-off in the difference quotient stays far below the tolerance even
    for coordinates with tiny gradients).
    """
    cfg = cfg or ViTConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    ref = cast_params(_random_params(cfg, rng), fd_dtype)
    x = rng.random((batch, cfg.image_px, cfg.image_px, 3)).astype(fd_dtype)
    w = rng.normal(size=(batch, cfg.n_prototypes)).astype(fd_dtype)

    params = cast_params(ref, dtype)
    emb, tape = forward(params, x.astype(dtype), cfg)
    head_forward(params, emb, tape)
    grads = backward(tape, w.astype(dtype))

    def loss(p):
        e, _ = forward(p, x, cfg, record=False)
        return (head_forward(p, e) * w).sum()

    names = list(ref)
    sizes = np.array([ref[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    probes = rng.choice(offsets[-1], size=min(n_probe_params, offsets[-1]), replace=False)
    h = fd_dtype(step)
    worst = 0.0
    for flat in np.sort(probes):
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, j = names[t], int(flat - offsets[t])
        arr = ref[name].reshape(-1)
        orig = arr[j]
        arr[j] = orig + h
        up = loss(ref)
        arr[j] = orig - h
        down = loss(ref)
        arr[j] = orig
        num = float((up - down) / (2 * h))
        ana = float(grads[name].reshape(-1)[j])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst
