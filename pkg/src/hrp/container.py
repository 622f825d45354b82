"""Binary tensor container shared by checkpoints, frame stores and demo files.

Layout (all integers little-endian)::

    b"HRPT" | version u32 | n_tensors u32
    per tensor: name_len u32 | name utf-8 | dtype u8 | rank u32 | dims u64 * rank | payload
    trailer_len u64 | trailer (utf-8 JSON)

dtype 0 is float32 (``<f4``), dtype 1 is uint8. Tensors are written in the
order given; round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HRPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


class ContainerError(IOError):
    pass


def encode(tensors: dict[str, np.ndarray], config: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        dt = np.dtype("u1") if a.dtype == np.uint8 else np.dtype("<f4")
        a = np.asarray(a, dtype=dt, order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", _CODES[dt], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    trailer = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(trailer)))
    parts.append(trailer)
    return b"".join(parts)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ContainerError("bad magic bytes")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off:off + nlen]).decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BI", view, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}Q", view, off)
            off += 8 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(view):
                raise ContainerError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(view[off:off + nbytes], dtype=dt).reshape(dims).copy()
            off += nbytes
        (tlen,) = struct.unpack_from("<Q", view, off)
        off += 8
        config = json.loads(bytes(view[off:off + tlen]).decode("utf-8"))
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt container: {exc}") from exc
    return tensors, config


def save(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode(tensors, config))
    except OSError as exc:
        raise ContainerError(f"cannot write {path}: {exc}") from exc


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    try:
        return decode(data)
    except ContainerError as exc:
        raise ContainerError(f"{path}: {exc}") from exc


def to_u8_image(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def from_u8_image(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames, dtype=np.float64) / 255.0
