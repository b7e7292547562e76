"""Binary ``BEVF`` tensor container and CSV helpers shared by the CLI."""

from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BEVF"
_HEADER = struct.Struct("<4sIII")


def write_bevf(path, data: np.ndarray) -> None:
    """Write a ``(C, H, W)`` or ``(H, W)`` array as little-endian float32."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D tensor, got shape {arr.shape}")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, c, h, w))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_bevf(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated BEVF header")
    magic, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    n = c * h * w
    if len(raw) != _HEADER.size + 4 * n:
        raise ValueError(f"{path}: payload size does not match header {c}x{h}x{w}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, h, w).astype(np.float32)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fmt_float(x: float) -> str:
    return f"{x:.6f}"


def write_rows(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
