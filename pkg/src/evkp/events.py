"""Event data model, voxel-grid encoding and event file I/O."""
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels

BINARY_MAGIC = b"FEEVT\x00\x00\x00"
_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class InvalidIntervalError(ValueError):
    pass


class OutOfRangeError(ValueError):
    pass


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class EventSlice:
    """Events of one frame interval, stored column-wise.

    ``t`` is in microseconds. ``t_min``/``t_max`` are the interval bounds, not
    the first/last event.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    t_min: int
    t_max: int
    width: int
    height: int

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64)
        x = np.asarray(self.x, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.int64)
        p = np.asarray(self.p, dtype=np.int8)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)
        if not (t.shape == x.shape == y.shape == p.shape) or t.ndim != 1:
            raise ValueError("event columns must be 1-D and equally long")
        if self.t_min >= self.t_max:
            raise InvalidIntervalError(f"t_min={self.t_min} must be < t_max={self.t_max}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor size must be positive")
        if t.size:
            if np.any(np.diff(t) < 0):
                raise ValueError("events must be sorted by timestamp")
            if t[0] < self.t_min or t[-1] > self.t_max:
                raise OutOfRangeError("event timestamp outside the interval")
            if x.min() < 0 or x.max() >= self.width or y.min() < 0 or y.max() >= self.height:
                raise OutOfRangeError("event coordinate outside the sensor")
            if not np.all(np.abs(p) == 1):
                raise ValueError("polarity must be -1 or +1")

    def __len__(self):
        return int(self.t.size)

    def __iter__(self):
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(*row)

    @classmethod
    def from_events(cls, events, t_min, t_max, width, height):
        events = sorted(events, key=lambda e: e.t)
        cols = np.array([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], t_min, t_max, width, height)

    @classmethod
    def empty(cls, t_min, t_max, width, height):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, t_min, t_max, width, height)

    def select(self, keep):
        """Sub-slice with the same interval and sensor size."""
        return EventSlice(self.t[keep], self.x[keep], self.y[keep], self.p[keep],
                          self.t_min, self.t_max, self.width, self.height)


@dataclass(frozen=True)
class VoxelGrid:
    values: np.ndarray  # (bins, height, width)

    @property
    def bins(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]


def normalize_time(t, t_min, t_max, bins):
    """Map a timestamp to fractional bin coordinate in ``[0, bins - 1]``."""
    if t_min >= t_max:
        raise InvalidIntervalError(f"t_min={t_min} must be < t_max={t_max}")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if t < t_min or t > t_max:
        raise OutOfRangeError(f"t={t} outside [{t_min}, {t_max}]")
    return (t - t_min) / (t_max - t_min) * (bins - 1)


def _normalize_times(t, t_min, t_max, bins):
    if t_min >= t_max:
        raise InvalidIntervalError(f"t_min={t_min} must be < t_max={t_max}")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    t = np.asarray(t, dtype=np.int64)
    if t.size and (t.min() < t_min or t.max() > t_max):
        raise OutOfRangeError("timestamp outside the interval")
    return (t - t_min).astype(np.float64) / float(t_max - t_min) * (bins - 1)


def event_bin_weights(t_star, bins):
    """Lower/upper bin index and weight for each normalized time.

    The upper weight is zero for events sitting exactly on the last bin.
    """
    t_star = np.asarray(t_star, dtype=np.float64)
    lo = np.floor(t_star).astype(np.int64)
    w_lo = np.maximum(0.0, 1.0 - np.abs(lo - t_star))
    hi = lo + 1
    w_hi = np.where(hi < bins, np.maximum(0.0, 1.0 - np.abs(hi - t_star)), 0.0)
    return lo, w_lo, hi, w_hi


def build_voxel_grid(events: EventSlice, bins: int) -> VoxelGrid:
    t_star = _normalize_times(events.t, events.t_min, events.t_max, bins)
    # canonical order makes the float accumulation independent of input order
    order = np.lexsort((events.p, events.x, events.y, events.t))
    grid = kernels.voxel_accumulate(
        np.ascontiguousarray(t_star[order]),
        np.ascontiguousarray(events.x[order]),
        np.ascontiguousarray(events.y[order]),
        events.p[order].astype(np.float64),
        bins, events.height, events.width,
    )
    return VoxelGrid(grid)


def merge(a: EventSlice, b: EventSlice) -> EventSlice:
    """Time-ordered union of two slices over the same interval; ``a`` wins ties."""
    if (a.t_min, a.t_max, a.width, a.height) != (b.t_min, b.t_max, b.width, b.height):
        raise ValueError("slices cover different intervals or sensors")
    t = np.concatenate([a.t, b.t])
    order = np.argsort(t, kind="stable")
    return EventSlice(t[order], np.concatenate([a.x, b.x])[order],
                      np.concatenate([a.y, b.y])[order], np.concatenate([a.p, b.p])[order],
                      a.t_min, a.t_max, a.width, a.height)


def inject_noise(events: EventSlice, rate: float, seed) -> EventSlice:
    """Add ``round(rate * duration_s * area)`` uniform random events.

    Noise polarity is a fair coin.
    """
    if rate < 0:
        raise ValueError("noise rate must be >= 0")
    duration = (events.t_max - events.t_min) * 1e-6
    count = int(round(rate * duration * events.width * events.height))
    if count == 0:
        return events
    rng = np.random.default_rng(seed)
    t = rng.integers(events.t_min, events.t_max, size=count, endpoint=True)
    x = rng.integers(0, events.width, size=count)
    y = rng.integers(0, events.height, size=count)
    p = np.where(rng.random(count) < 0.5, -1, 1)
    order = np.argsort(t, kind="stable")
    noise = EventSlice(t[order], x[order], y[order], p[order],
                       events.t_min, events.t_max, events.width, events.height)
    return merge(events, noise)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _finish(t, x, y, p, t_min, t_max, width, height):
    if width is None:
        width = int(x.max()) + 1 if x.size else 1
    if height is None:
        height = int(y.max()) + 1 if y.size else 1
    if t_min is None:
        t_min = int(t.min()) if t.size else 0
    if t_max is None:
        t_max = int(t.max()) if t.size else t_min + 1
        if t_max <= t_min:
            t_max = t_min + 1
    order = np.argsort(t, kind="stable")
    return EventSlice(t[order], x[order], y[order], p[order], t_min, t_max, width, height)


def write_events_text(path, events: EventSlice):
    with open(path, "w") as fh:
        for e in events:
            fh.write(f"{e.t},{e.x},{e.y},{e.p}\n")


def read_events_text(path, t_min=None, t_max=None, width=None, height=None) -> EventSlice:
    """Read ``t_us,x,y,p`` lines. Missing bounds/size are inferred from the data."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields")
            rows.append([int(v) for v in parts])
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return _finish(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], t_min, t_max, width, height)


def write_events_binary(path, events: EventSlice):
    header = BINARY_MAGIC + np.array([events.width, events.height], dtype="<u2").tobytes()
    rec = np.empty(len(events), dtype=_RECORD)
    rec["t"] = events.t
    rec["x"] = events.x
    rec["y"] = events.y
    rec["p"] = events.p
    Path(path).write_bytes(header + rec.tobytes())


def read_events_binary(path, t_min=None, t_max=None) -> EventSlice:
    raw = Path(path).read_bytes()
    if raw[:8] != BINARY_MAGIC:
        raise ValueError(f"{path}: bad magic")
    width, height = np.frombuffer(raw, dtype="<u2", count=2, offset=8)
    body = raw[12:]
    if len(body) % _RECORD.itemsize:
        raise ValueError(f"{path}: truncated record")
    rec = np.frombuffer(body, dtype=_RECORD)
    return _finish(rec["t"].astype(np.int64), rec["x"].astype(np.int64),
                   rec["y"].astype(np.int64), rec["p"].astype(np.int64),
                   t_min, t_max, int(width), int(height))
