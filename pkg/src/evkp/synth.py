"""Synthetic training data: homography image sequences, blur, simulated events."""
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .events import EventSlice, inject_noise, write_events_binary
from .geometry import (HomographyBounds, compose, identity, sample_homography,
                       warp_bilinear, write_homographies)
from .imageio import write_pgm

LOG_EPS = 1e-3
MANIFEST = "manifest.txt"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    """Sequence/interval/exposure lengths are counted in dense frames.

    ``m3=None`` draws the exposure length per interval, uniformly among the
    integers in ``[0.2 * m2, 0.6 * m2]``.
    """

    m1: int = 300
    m2: int = 10
    contrast_threshold: float = 0.2
    fps: float = 1000.0
    noise_rate: float = 0.0
    seed: int = 0
    m3: int = None
    bounds: HomographyBounds = field(default_factory=lambda: HomographyBounds(
        translation=0.5, rotation=0.002, scale=0.002, perspective=0.0))
    gain_range: tuple = (1.0, 1.0)
    bias_range: tuple = (0.0, 0.0)
    t0_us: int = 0

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 1:
            raise ConfigError("m1 and m2 must be positive")
        if self.m2 > self.m1:
            raise ConfigError("m2 must not exceed m1")
        if self.contrast_threshold <= 0:
            raise ConfigError("contrast threshold must be > 0")
        if not 0 < self.fps <= 1e6:
            raise ConfigError("fps must be in (0, 1e6]")
        if self.noise_rate < 0:
            raise ConfigError("noise rate must be >= 0")
        if self.m3 is not None and not 0.2 * self.m2 <= self.m3 <= 0.6 * self.m2:
            raise ConfigError(f"m3={self.m3} outside [0.2*m2, 0.6*m2]")
        if self.m3 is None and not self.m3_range()[0] <= self.m3_range()[1]:
            raise ConfigError(f"no integer exposure length fits m2={self.m2}")

    def m3_range(self):
        if self.m3 is not None:
            return self.m3, self.m3
        lo = max(1, math.ceil(0.2 * self.m2 - 1e-9))
        hi = math.floor(0.6 * self.m2 + 1e-9)
        return lo, hi

    def frame_time(self, n):
        return self.t0_us + int(round(n * 1e6 / self.fps))


@dataclass
class SyntheticSequence:
    """Frames ``I^0..I^M1`` (index 0 is the base image) with ``T^(0,n)`` and times."""

    frames: np.ndarray
    homographies: np.ndarray
    times: np.ndarray


@dataclass
class SynthSample:
    sample_id: str
    sequence: str
    blurred_frame: np.ndarray
    events: EventSlice
    gt_times: np.ndarray
    gt: np.ndarray
    exposure: int


def generate_sequence(base, cfg: SynthConfig, rng=None, steps=None) -> SyntheticSequence:
    """Random-walk a homography over ``cfg.m1`` steps and warp the base image.

    ``steps`` overrides the random per-step homographies (one per frame).
    """
    base = np.asarray(base, dtype=np.float64)
    h, w = base.shape
    if min(h, w) < 2 * cfg.m3_range()[1]:
        raise ConfigError("base image too small for the exposure length")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if steps is not None and len(steps) != cfg.m1:
        raise ValueError("need exactly m1 step homographies")
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    frames = np.empty((cfg.m1 + 1, h, w))
    mats = np.empty((cfg.m1 + 1, 3, 3))
    frames[0] = base
    mats[0] = identity()
    T = identity()
    for n in range(1, cfg.m1 + 1):
        step = steps[n - 1] if steps is not None else sample_homography(cfg.bounds, rng, center)
        T = compose(step, T)
        mats[n] = T
        frames[n] = warp_bilinear(base, T)[0]
    times = np.array([cfg.frame_time(n) for n in range(cfg.m1 + 1)], dtype=np.int64)
    return SyntheticSequence(frames, mats, times)


def synth_blur(frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValueError("need a non-empty stack of frames")
    return frames.mean(axis=0)


def grayscale_augment(img, gain, bias) -> np.ndarray:
    return np.clip(gain * np.asarray(img, dtype=np.float64) + bias, 0.0, 1.0)


def simulate_events(frames, timestamps, contrast_threshold, return_reference=False):
    """Per-pixel log-intensity threshold-crossing simulator.

    Log intensity is ``log(I + 1e-3)`` and is linearly interpolated in time
    between frames; each crossing of ``ref +/- C`` emits one event at the
    interpolated time (rounded to whole microseconds) and moves ``ref`` by C.
    With ``return_reference`` the final per-pixel reference levels are also
    returned.
    """
    frames = np.asarray(frames, dtype=np.float64)
    times = np.asarray(timestamps, dtype=np.int64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError("need at least two frames")
    if times.shape != (frames.shape[0],):
        raise ValueError("one timestamp per frame required")
    if np.any(np.diff(times) <= 0):
        raise ValueError("frame timestamps must be strictly increasing")
    if contrast_threshold <= 0:
        raise ValueError("contrast threshold must be > 0")
    height, width = frames.shape[1:]
    logs = np.log(frames + LOG_EPS)
    t, pix, pol, ref = kernels.simulate(logs, times.astype(np.float64), float(contrast_threshold))
    t_us = np.rint(t).astype(np.int64)
    order = np.lexsort((t, pix, t_us))
    pix = pix[order]
    out = EventSlice(t_us[order], pix % width, pix // width, pol[order],
                     int(times[0]), int(times[-1]), width, height)
    if return_reference:
        return out, ref
    return out


def _interval_events(events: EventSlice, t_min, t_max, first):
    keep = (events.t > t_min) & (events.t <= t_max)
    if first:
        keep |= events.t == t_min
    sub = events.select(keep)
    return EventSlice(sub.t, sub.x, sub.y, sub.p, t_min, t_max, sub.width, sub.height)


def build_samples(base, cfg: SynthConfig, base_index=0):
    """All interval samples of one base image."""
    if cfg.m1 % cfg.m2:
        raise ConfigError(f"m1={cfg.m1} is not divisible by m2={cfg.m2}")
    seq_name = f"seq{base_index:04d}"
    seq = generate_sequence(base, cfg, rng=np.random.default_rng([cfg.seed, base_index]))
    events = simulate_events(seq.frames, seq.times, cfg.contrast_threshold)
    lo, hi = cfg.m3_range()
    samples = []
    for k in range(1, cfg.m1 // cfg.m2 + 1):
        rng = np.random.default_rng([cfg.seed, base_index, k])
        a, b = (k - 1) * cfg.m2, k * cfg.m2
        m3 = int(rng.integers(lo, hi, endpoint=True))
        blurred = synth_blur(seq.frames[b - m3 + 1:b + 1])
        gain = rng.uniform(*cfg.gain_range)
        bias = rng.uniform(*cfg.bias_range)
        blurred = grayscale_augment(blurred, gain, bias)
        ev = _interval_events(events, int(seq.times[a]), int(seq.times[b]), first=(k == 1))
        ev = inject_noise(ev, cfg.noise_rate, rng)
        samples.append(SynthSample(f"{seq_name}_{k:04d}", seq_name, blurred, ev,
                                   seq.times[a:b + 1].copy(), seq.homographies[a:b + 1].copy(), m3))
    return samples, seq


def build_dataset(bases, cfg: SynthConfig, out_dir=None):
    """Build every sample for every base image; write the dataset if ``out_dir`` is set.

    Layout: ``<sample_id>/{frame.pgm,events.bin,gt.txt}``, the full per-sequence
    ground truth under ``sequences/<seq>.gt.txt`` and ``manifest.txt`` with one
    ``sample_id,frame_path,event_path,gt_path`` line per sample.
    """
    if cfg.m1 % cfg.m2:
        raise ConfigError(f"m1={cfg.m1} is not divisible by m2={cfg.m2}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "sequences").mkdir(parents=True, exist_ok=True)
    all_samples, lines = [], []
    for i, base in enumerate(bases):
        samples, seq = build_samples(base, cfg, i)
        all_samples.extend(samples)
        if out is None:
            continue
        write_homographies(out / "sequences" / f"{samples[0].sequence}.gt.txt",
                           seq.times, seq.homographies)
        for s in samples:
            d = out / s.sample_id
            d.mkdir(exist_ok=True)
            write_pgm(d / "frame.pgm", s.blurred_frame)
            write_events_binary(d / "events.bin", s.events)
            write_homographies(d / "gt.txt", s.gt_times, s.gt)
            lines.append(f"{s.sample_id},{s.sample_id}/frame.pgm,"
                         f"{s.sample_id}/events.bin,{s.sample_id}/gt.txt")
    if out is not None:
        (out / MANIFEST).write_text("".join(line + "\n" for line in lines))
    return all_samples


def read_manifest(dataset_dir):
    """Return ``[(sample_id, frame, events, gt), ...]`` with absolute paths."""
    root = Path(dataset_dir)
    rows = []
    for line in (root / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        sid, frame, ev, gt = line.split(",")
        rows.append((sid, root / frame, root / ev, root / gt))
    return rows


def dataset_digest(dataset_dir) -> str:
    """sha256 over every file path and content in the dataset directory."""
    root = Path(dataset_dir)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
