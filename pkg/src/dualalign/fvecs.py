"""fvecs reader/writer: each record is ``int32 dim`` followed by ``dim`` float32,
all little-endian."""

from __future__ import annotations

import os

import numpy as np

from .errors import CorruptRecord, DimMismatch

_I32 = np.dtype("<i4")
_F32 = np.dtype("<f4")


def read_fvecs(path) -> np.ndarray:
    """Read every record of ``path`` into an ``(N, dim)`` float32 array.

    An empty file gives an array of shape ``(0, 0)``.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if not raw:
        return np.zeros((0, 0), dtype=np.float32)
    if len(raw) < 4:
        raise CorruptRecord(0, "truncated dimension header")
    dim = int(np.frombuffer(raw, dtype=_I32, count=1)[0])
    if dim <= 0:
        raise CorruptRecord(0, f"non-positive dimension {dim}")
    rec = 4 * (dim + 1)
    if len(raw) % rec == 0:
        words = np.frombuffer(raw, dtype=_I32).reshape(-1, dim + 1)
        bad = np.flatnonzero(words[:, 0] != dim)
        if not bad.size:
            out = words[:, 1:].copy().view(_F32)
            return out.astype(np.float32, copy=False)
    # slow path: locate the first malformed record
    offset = 0
    while offset < len(raw):
        if offset + 4 > len(raw):
            raise CorruptRecord(offset, "truncated dimension header")
        d = int(np.frombuffer(raw, dtype=_I32, count=1, offset=offset)[0])
        if d <= 0:
            raise CorruptRecord(offset, f"non-positive dimension {d}")
        if d != dim:
            raise DimMismatch(f"record at byte {offset} has dim {d}, expected {dim}")
        if offset + 4 + 4 * d > len(raw):
            raise CorruptRecord(offset, "truncated payload")
        offset += 4 + 4 * d
    raise CorruptRecord(0, "inconsistent layout")  # pragma: no cover


def write_fvecs(path, vectors) -> None:
    """Write rows of ``vectors`` (array or list of equal-length sequences)."""
    if isinstance(vectors, np.ndarray):
        arr = vectors
    else:
        rows = [np.asarray(v) for v in vectors]
        if len({r.shape for r in rows}) > 1:
            raise DimMismatch("all vectors written to one fvecs file must share a dimension")
        arr = np.stack(rows) if rows else np.zeros((0, 0))
    if arr.ndim != 2:
        raise DimMismatch(f"expected a 2-D array, got shape {arr.shape}")
    n, d = arr.shape
    block = np.empty((n, d + 1), dtype=_I32)
    block[:, 0] = d
    block[:, 1:] = np.ascontiguousarray(arr, dtype=_F32).view(_I32)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        if n:
            f.write(block.tobytes())
    os.replace(tmp, path)
