"""Minimal binary PPM (P6) / PGM (P5) codec for 8-bit rasters."""

from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    """Encode a ``(H, W)`` or ``(H, W, 3)`` uint8 array as P5 / P6 bytes."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 array, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"unsupported raster shape {arr.shape}")
    h, w = arr.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + np.ascontiguousarray(arr).tobytes()


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    # Header tokens are whitespace separated; '#' starts a comment until end of line.
    out: list[bytes] = []
    pos = 0
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the pixel data
    if pos >= n or not data[pos : pos + 1].isspace():
        raise NetpbmError("truncated header")
    return out, pos + 1


def decode(data: bytes, name: str = "<bytes>") -> np.ndarray:
    tokens, offset = _tokens(data, 4)
    magic = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise NetpbmError(f"{name}: unknown magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise NetpbmError(f"{name}: malformed header") from exc
    if maxval != 255:
        raise NetpbmError(f"{name}: only maxval 255 is supported, got {maxval}")
    expected = w * h * channels
    payload = data[offset:]
    if len(payload) != expected:
        raise NetpbmError(
            f"{name}: size mismatch, expected {expected} pixel bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return arr.reshape(shape).copy()


def write(path, arr: np.ndarray) -> bytes:
    blob = encode(arr)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read(), name=str(path))
