"""FMR1 table and sidecar writers.

Mirrors the consumer's on-disk contract: magic "FMR1", little-endian u32
version/rows/dim, row-major f32 payload, one mask byte per row; sidecar
lines are `row_index<TAB>item_id`. Implemented here independently so the
two packages stay coupled through bytes alone.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_MAGIC = b"FMR1"
_HEADER = struct.Struct("<III")


def write_fmr1(path: str | Path, data: np.ndarray,
               missing: np.ndarray | None = None) -> None:
    arr = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("modality data must be 2-D")
    mask = (np.zeros(arr.shape[0], dtype=bool) if missing is None
            else np.asarray(missing, dtype=bool))
    if mask.shape != (arr.shape[0],):
        raise ValueError("missing mask must have one entry per row")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(1, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())
        fh.write(mask.astype(np.uint8).tobytes())


def write_sidecar(path: str | Path, ids: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row, item_id in enumerate(ids):
            fh.write(f"{row}\t{item_id}\n")
