"""Keypoint extraction and spatio-temporal nearest-neighbour tracking.

A new keypoint joins the closest active track whose last observation lies
within ``radius`` pixels (Euclidean) and ``window_us`` microseconds;
otherwise it starts a new track. Keypoints of one timestamp are processed in
descending score order and each track accepts at most one keypoint per
timestamp. Distance ties go to the lower track id.
"""
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .heatmaps import heatmap_timestamps
from .losses import HeatmapSeq

THRESHOLD = 0.95
RADIUS = 4.0
WINDOW_US = 12_000


class TimestampRegressionError(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    t: int
    score: float


@dataclass
class Track:
    id: int
    observations: list = field(default_factory=list)

    @property
    def birth(self):
        return self.observations[0].t

    @property
    def death(self):
        return self.observations[-1].t

    @property
    def last(self):
        return self.observations[-1]


@dataclass(frozen=True)
class TrackerParams:
    radius: float = RADIUS
    window_us: int = WINDOW_US
    threshold: float = THRESHOLD
    nms: bool = False
    subpixel: bool = False


def extract_keypoints(h, t, threshold=THRESHOLD, nms=False, subpixel=False):
    """Pixels above ``threshold`` in row-major order.

    With ``nms`` a pixel must beat its 3x3 neighbourhood; among equal values
    only the row-major-first one survives. ``subpixel`` replaces integer
    coordinates by the 3x3 intensity centroid.
    """
    h = np.asarray(h, dtype=np.float64)
    cand = h > threshold
    if nms and cand.any():
        height, width = h.shape
        pad = np.pad(h, 1, constant_values=-np.inf)
        keep = cand.copy()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                nb = pad[1 + dy:1 + dy + height, 1 + dx:1 + dx + width]
                earlier = dy < 0 or (dy == 0 and dx < 0)
                keep &= (nb < h) if earlier else (nb <= h)
        cand = keep
    ys, xs = np.nonzero(cand)
    out = []
    for y, x in zip(ys.tolist(), xs.tolist()):
        px, py = float(x), float(y)
        if subpixel:
            y0, y1 = max(0, y - 1), min(h.shape[0], y + 2)
            x0, x1 = max(0, x - 1), min(h.shape[1], x + 2)
            win = h[y0:y1, x0:x1]
            wy, wx = np.mgrid[y0:y1, x0:x1]
            total = win.sum()
            px, py = float((win * wx).sum() / total), float((win * wy).sum() / total)
        out.append(Keypoint(px, py, int(t), float(h[y, x])))
    return out


def _score_order(kps):
    return sorted(range(len(kps)), key=lambda i: -kps[i].score)


class TrackerState:
    """Active/closed tracks plus a spatial hash of active tracks' last positions."""

    def __init__(self, radius=RADIUS, window_us=WINDOW_US):
        self.radius = float(radius)
        self.window_us = int(window_us)
        self.cell = max(self.radius, 1.0)
        self.active = {}
        self.closed = []
        self.time = None
        self._next_id = 0
        self._hash = defaultdict(set)

    def _key(self, x, y):
        return (math.floor(x / self.cell), math.floor(y / self.cell))

    def _insert(self, track):
        self._hash[self._key(track.last.x, track.last.y)].add(track.id)

    def _remove(self, track):
        key = self._key(track.last.x, track.last.y)
        bucket = self._hash[key]
        bucket.discard(track.id)
        if not bucket:
            del self._hash[key]

    def _new_track(self, kp):
        track = Track(self._next_id, [kp])
        self._next_id += 1
        self.active[track.id] = track
        self._insert(track)
        return track

    def _close_idle(self, t):
        for tid in sorted(tid for tid, tr in self.active.items() if t - tr.last.t > self.window_us):
            track = self.active.pop(tid)
            self._remove(track)
            self.closed.append(track)

    def _candidates(self, kp):
        reach = int(math.ceil(self.radius / self.cell))
        cx, cy = self._key(kp.x, kp.y)
        for gx in range(cx - reach, cx + reach + 1):
            for gy in range(cy - reach, cy + reach + 1):
                yield from self._hash.get((gx, gy), ())

    def associate(self, kps):
        """Feed keypoints sharing one timestamp; returns the track id of each."""
        if not kps:
            return []
        t = kps[0].t
        if any(k.t != t for k in kps):
            raise ValueError("keypoints must share one timestamp")
        if self.time is not None and t < self.time:
            raise TimestampRegressionError(f"t={t} precedes tracker time {self.time}")
        self.time = t
        self._close_idle(t)
        assigned = [None] * len(kps)
        for i in _score_order(kps):
            kp = kps[i]
            best, best_d = None, None
            for tid in self._candidates(kp):
                track = self.active[tid]
                last = track.last
                if last.t >= t:  # already extended (or born) at this timestamp
                    continue
                dx, dy = kp.x - last.x, kp.y - last.y
                d = dx * dx + dy * dy
                if d > self.radius * self.radius:
                    continue
                if best is None or d < best_d or (d == best_d and tid < best):
                    best, best_d = tid, d
            if best is None:
                assigned[i] = self._new_track(kp).id
            else:
                track = self.active[best]
                self._remove(track)
                track.observations.append(kp)
                self._insert(track)
                assigned[i] = best
        return assigned

    def finish(self):
        """Close every track; returns all tracks sorted by (birth, id)."""
        self.closed.extend(self.active.values())
        self.active.clear()
        self._hash.clear()
        return sorted(self.closed, key=lambda tr: (tr.birth, tr.id))


class BruteForceTracker:
    """All-pairs reference for :class:`TrackerState` (same tie rules, no hashing)."""

    def __init__(self, radius=RADIUS, window_us=WINDOW_US):
        self.radius = float(radius)
        self.window_us = int(window_us)
        self.tracks = []
        self.time = None

    def associate(self, kps):
        if not kps:
            return []
        t = kps[0].t
        if self.time is not None and t < self.time:
            raise TimestampRegressionError(f"t={t} precedes tracker time {self.time}")
        self.time = t
        n = len(self.tracks)
        lx = np.array([tr.last.x for tr in self.tracks], dtype=np.float64)
        ly = np.array([tr.last.y for tr in self.tracks], dtype=np.float64)
        lt = np.array([tr.last.t for tr in self.tracks], dtype=np.int64)
        usable = (t - lt <= self.window_us) & (lt < t)
        assigned = [None] * len(kps)
        for i in _score_order(kps):
            kp = kps[i]
            if n:
                dx, dy = kp.x - lx, kp.y - ly
                d = dx * dx + dy * dy
                ok = usable & (d <= self.radius * self.radius)
                if ok.any():
                    j = int(np.flatnonzero(ok)[np.argmin(d[ok])])  # first = lowest id on ties
                    self.tracks[j].observations.append(kp)
                    usable[j] = False
                    assigned[i] = j
                    continue
            self.tracks.append(Track(len(self.tracks), [kp]))
            assigned[i] = len(self.tracks) - 1
        return assigned

    def finish(self):
        return sorted(self.tracks, key=lambda tr: (tr.birth, tr.id))


def run_tracker(sequences, params: TrackerParams = TrackerParams()):
    """Track keypoints through consecutive :class:`HeatmapSeq` intervals."""
    state = TrackerState(params.radius, params.window_us)
    last_t = None
    for seq in sequences:
        for t, h in zip(heatmap_timestamps(seq.t0, seq.t1, len(seq)), seq.maps):
            if last_t is not None and t < last_t:
                raise TimestampRegressionError("heatmap timestamps are not monotone")
            last_t = t
            kps = extract_keypoints(h, t, params.threshold, params.nms, params.subpixel)
            state.associate(kps)
    return state.finish()


# ---------------------------------------------------------------------------
# classical stand-in detector
# ---------------------------------------------------------------------------


def harris_response(img, k=0.04, sigma=1.0):
    img = np.asarray(img, dtype=np.float64)
    ix = ndimage.sobel(img, axis=1, mode="nearest")
    iy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _minmax(a):
    lo, hi = a.min(), a.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return None
    return (a - lo) / (hi - lo)


def baseline_heatmaps(frame, voxel, n, t0, t1, event_floor=0.2, peak_normalize=False):
    """Harris response gated by event activity, repeated ``n`` times.

    The Harris map is min-max normalized (a flat frame gives zeros); the event
    map is the min-max normalized sum of ``|voxel|`` over bins, floored at
    ``event_floor``. A slice without any event variation leaves the Harris map
    ungated. ``peak_normalize`` divides the gated map by its maximum so the
    strongest response sits at 1.
    """
    frame = np.asarray(frame, dtype=np.float64)
    values = getattr(voxel, "values", voxel)
    if values.shape[1:] != frame.shape:
        raise ValueError("voxel grid and frame differ in size")
    harris = _minmax(harris_response(frame))
    if harris is None:
        return HeatmapSeq(np.zeros((n,) + frame.shape), t0, t1)
    activity = _minmax(np.abs(values).sum(axis=0))
    gate = np.ones_like(frame) if activity is None else np.maximum(activity, event_floor)
    h = harris * gate
    if peak_normalize:
        h = h / h.max()
    return HeatmapSeq(np.repeat(h[None], n, axis=0), t0, t1)


# ---------------------------------------------------------------------------
# track file
# ---------------------------------------------------------------------------


def write_tracks(path, tracks):
    """``track_id,t_us,x,y,score`` lines grouped by track, tracks by birth time."""
    with open(path, "w") as fh:
        for tr in sorted(tracks, key=lambda tr: (tr.birth, tr.id)):
            for kp in tr.observations:
                # repr of a plain float round-trips exactly; numpy scalars would print their type
                fh.write(f"{int(tr.id)},{int(kp.t)},{float(kp.x)!r},{float(kp.y)!r},{float(kp.score)!r}\n")


def read_tracks(path):
    """Inverse of :func:`write_tracks`; a leading ``track_id,...`` header line is skipped."""
    tracks = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or (lineno == 1 and line.startswith("track_id")):
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields")
            try:
                tid = int(parts[0])
                kp = Keypoint(float(parts[2]), float(parts[3]), int(parts[1]), float(parts[4]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed track line") from None
            tracks.setdefault(tid, Track(tid)).observations.append(kp)
    return sorted(tracks.values(), key=lambda tr: (tr.birth, tr.id))
