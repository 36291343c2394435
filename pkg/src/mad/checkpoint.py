"""Binary tensor container ("MADC") plus a JSON sidecar.

Layout: magic ``MADC``, u32 version, u32 tensor count, then per tensor (in
lexicographic name order) a u16 name length, UTF-8 name, u8 ndim, ndim x u32
dims and little-endian float32 values in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MADC"
VERSION = 1


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes, name: str = "<bytes>") -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic {blob[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise FormatError(f"{name}: unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            tname = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(blob):
                raise FormatError(f"{name}: truncated tensor {tname}")
            out[tname] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{name}: truncated or corrupt checkpoint") from exc
    if pos != len(blob):
        raise FormatError(f"{name}: {len(blob) - pos} trailing bytes")
    return out


def save(path, tensors: dict[str, np.ndarray], sidecar: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    if sidecar is not None:
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint {path} not found")
    tensors = decode_tensors(path.read_bytes(), name=str(path))
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.is_file() else {}
    return tensors, meta


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
