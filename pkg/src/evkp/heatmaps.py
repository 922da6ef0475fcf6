"""Heatmap timing and the FEHM heatmap-sequence file.

FEHM layout (little endian): ``b"FEHM"``, u32 width, u32 height, u32 N,
u64 base timestamp (interval start, us), u64 interval length (us), then
N * H * W float32 values.
"""
import struct
from pathlib import Path

import numpy as np

from .losses import HeatmapSeq

MAGIC = b"FEHM"
_HEADER = struct.Struct("<4sIIIQQ")


def heatmap_timestamps(t0, t1, n):
    """Uniform instants ``t1 - (n-1-i) * (t1 - t0) / n`` rounded to whole us.

    The last heatmap lands exactly on ``t1``.
    """
    if t0 >= t1:
        raise ValueError(f"degenerate interval [{t0}, {t1}]")
    if n < 1:
        raise ValueError("n must be >= 1")
    span = int(t1) - int(t0)
    # integer round-half-up keeps this exact for large timestamps
    return [int(t1) - (2 * (n - 1 - i) * span + n) // (2 * n) for i in range(n)]


def write_heatmaps(path, seq: HeatmapSeq):
    n, h, w = seq.maps.shape
    header = _HEADER.pack(MAGIC, w, h, n, seq.t0, seq.t1 - seq.t0)
    Path(path).write_bytes(header + np.asarray(seq.maps, dtype="<f4").tobytes())


def read_heatmaps(path) -> HeatmapSeq:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, w, h, n, t0, span = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic")
    if len(raw) != _HEADER.size + 4 * n * h * w:
        raise ValueError(f"{path}: payload size does not match header")
    maps = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, h, w)
    return HeatmapSeq(maps.astype(np.float64), int(t0), int(t0 + span))
