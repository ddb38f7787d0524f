"""Binary file formats: feature matrices, alignment caches and checkpoints.

All integers are little-endian. Feature files are ``FHMMFEAT`` + version, T, D
(uint32) + row-major float32. Alignment files are ``FHMMALGN`` + version, T
(uint32), inventory digest (uint64) + T uint32 allophone indices. Checkpoints
are ``FHMMCKPT`` + version + a JSON metadata block + named float32 tensors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"FHMMFEAT"
ALIGNMENT_MAGIC = b"FHMMALGN"
CHECKPOINT_MAGIC = b"FHMMCKPT"
VERSION = 1


class FormatError(ValueError):
    pass


def _read_magic(f, magic: bytes, path) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")


def write_features(path: str | Path, features: np.ndarray) -> None:
    x = np.ascontiguousarray(features, dtype="<f4")
    if x.ndim != 2:
        raise ValueError("features must be T x D")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<III", VERSION, *x.shape))
        f.write(x.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        _read_magic(f, FEATURE_MAGIC, path)
        T, D = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != T * D:
        raise FormatError(f"{path}: expected {T * D} values, found {data.size}")
    return data.reshape(T, D).astype(np.float32)


def write_alignment(path: str | Path, labels: np.ndarray, inventory_digest: int) -> None:
    idx = np.ascontiguousarray(labels, dtype="<u4")
    with open(path, "wb") as f:
        f.write(ALIGNMENT_MAGIC + struct.pack("<IIQ", VERSION, len(idx), inventory_digest))
        f.write(idx.tobytes())


def read_alignment(path: str | Path) -> tuple[np.ndarray, int]:
    """Return ``(allophone indices, inventory digest)``."""
    with open(path, "rb") as f:
        _read_magic(f, ALIGNMENT_MAGIC, path)
        T, digest = struct.unpack("<IQ", f.read(12))
        data = np.frombuffer(f.read(), dtype="<u4")
    if data.size != T:
        raise FormatError(f"{path}: expected {T} labels, found {data.size}")
    return data.astype(np.int64), digest


def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)) + encoded)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        _read_magic(f, CHECKPOINT_MAGIC, path)
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", f.read(2))
            name = f.read(n).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(f.read(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    return tensors, meta
