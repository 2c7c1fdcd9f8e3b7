"""Named-tensor container files.

Layout (all integers little-endian):

    line 1:        "tensor-container v1\\n"
    metadata:      "key: value\\n" per entry, keys sorted; always includes
                   "tensors: <count>"
    separator:     one blank line
    per tensor:    u32 name length, name (UTF-8),
                   u8 dtype tag (4 = float32, 8 = float64),
                   u8 rank, rank x u64 extents,
                   payload (row-major IEEE-754, little-endian)

Writes go to a temporary file in the target directory followed by an
atomic rename, so a crash never leaves a partial file at the final path.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import IntegrityError

MAGIC = b"tensor-container v1\n"

_DTYPE_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}


def atomic_write_bytes(path: str, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path: str, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None):
    meta = dict(meta or {})
    meta["tensors"] = str(len(tensors))
    chunks = [MAGIC]
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in key or "\n" in value or ":" in key:
            raise IntegrityError(f"metadata entry {key!r} contains reserved characters")
        chunks.append(f"{key}: {value}\n".encode("utf-8"))
    chunks.append(b"\n")
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float32:
            tag = 4
        elif arr.dtype == np.float64:
            tag = 8
        else:
            arr = arr.astype(np.float32)
            tag = 4
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(_DTYPE_TAGS[tag]).tobytes(order="C"))
    atomic_write_bytes(path, b"".join(chunks))


def _read_exact(f, n: int, path: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IntegrityError(f"truncated tensor container: {path}")
    return buf


def load_tensors(path: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if not os.path.exists(path):
        raise IOError(f"tensor container not found: {path}")
    with open(path, "rb") as f:
        if f.readline() != MAGIC:
            raise IntegrityError(f"bad magic in tensor container: {path}")
        meta: dict[str, str] = {}
        while True:
            line = f.readline()
            if line in (b"\n", b""):
                break
            text = line.decode("utf-8").rstrip("\n")
            if ": " not in text:
                raise IntegrityError(f"malformed metadata line in {path}: {text!r}")
            key, value = text.split(": ", 1)
            meta[key] = value
        if "tensors" not in meta:
            raise IntegrityError(f"metadata missing tensor count: {path}")
        count = int(meta["tensors"])
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, path))
            name = _read_exact(f, name_len, path).decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(f, 2, path))
            if tag not in _DTYPE_TAGS:
                raise IntegrityError(f"unknown dtype tag {tag} in {path}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, path))
            n_items = int(np.prod(shape)) if rank else 1
            raw = _read_exact(f, n_items * tag, path)
            tensors[name] = np.frombuffer(raw, dtype=_DTYPE_TAGS[tag]).reshape(shape).copy()
        if f.read(1):
            raise IntegrityError(f"trailing bytes after last tensor record: {path}")
    return tensors, meta
