"""Minimal binary PGM (P5, 8-bit) reader/writer for [0, 1] grayscale images."""
from pathlib import Path

import numpy as np


def _tokens(raw, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        out.append(raw[start:pos])
    return out, pos + 1  # one whitespace byte ends the header


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(raw, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        data = np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos)
    else:
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, img):
    img = np.asarray(img, dtype=np.float64)
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())
