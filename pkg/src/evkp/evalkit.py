"""Tracking metrics: delta-t homography reprojection error (RPE), ratio of failed
matches (RFM) and mean track time, plus report and trajectory-plot emission."""
import json
import math
from dataclasses import asdict, dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .geometry import apply_point, compose, invert, read_homographies

DELTA_TS_MS = (25, 50, 100, 150, 200)
FAIL_THRESHOLD_PX = 10.0
LOOKUP_TOL_US = 1000
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


class MissingGroundTruthError(LookupError):
    pass


@dataclass
class GroundTruth:
    """``homographies[i]`` is ``T^(0, times[i])`` relative to a common reference."""

    times: np.ndarray
    homographies: np.ndarray
    tolerance_us: int = LOOKUP_TOL_US

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.homographies = np.asarray(self.homographies, dtype=np.float64).reshape(-1, 3, 3)
        if len(self.times) != len(self.homographies):
            raise ValueError("one homography per timestamp required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("ground-truth timestamps must be strictly increasing")

    @classmethod
    def from_file(cls, path, tolerance_us=LOOKUP_TOL_US):
        times, mats = read_homographies(path)
        return cls(times, mats, tolerance_us)

    def lookup(self, t):
        i = _nearest(self.times, t)
        if i is None or abs(int(self.times[i]) - t) > self.tolerance_us:
            raise MissingGroundTruthError(f"no ground truth within {self.tolerance_us} us of t={t}")
        return self.homographies[i]


def _nearest(times, t):
    if len(times) == 0:
        return None
    i = int(np.searchsorted(times, t))
    if i == len(times):
        return i - 1
    if i > 0 and t - times[i - 1] <= times[i] - t:
        return i - 1
    return i


def gt_between(gt: GroundTruth, t_a, t_b):
    """``T^(t_a, t_b) = T^(0, t_b) @ inv(T^(0, t_a))``."""
    return compose(gt.lookup(t_b), invert(gt.lookup(t_a)))


@dataclass
class RpeResult:
    rpe: float  # None when there were no matches
    rfm: float  # None when there were no matches
    matches: int
    failed: int

    @property
    def no_data(self):
        return self.matches == 0


def compute_rpe(tracks, gt: GroundTruth, delta_t_ms, fail_threshold=FAIL_THRESHOLD_PX,
                tolerance_us=LOOKUP_TOL_US):
    """Reproject each observation ``delta_t`` ahead with ground truth and compare.

    A pair is formed when the same track has an observation within
    ``tolerance_us`` of ``t + delta_t`` (nearest one wins). Errors above
    ``fail_threshold`` count as failed matches; RPE averages the rest.
    """
    if delta_t_ms <= 0:
        raise ValueError("delta_t must be positive")
    dt = int(round(delta_t_ms * 1000))
    errors = []
    relative = {}  # (t_a, t_b) -> homography; tracks usually share timestamps
    for tr in tracks:
        times = np.array([kp.t for kp in tr.observations], dtype=np.int64)
        for kp in tr.observations:
            j = _nearest(times, kp.t + dt)
            if j is None or abs(int(times[j]) - (kp.t + dt)) > tolerance_us or times[j] == kp.t:
                continue
            other = tr.observations[j]
            key = (kp.t, other.t)
            T = relative.get(key)
            if T is None:
                T = relative[key] = gt_between(gt, kp.t, other.t)
            px, py = apply_point(T, (kp.x, kp.y))
            errors.append(math.hypot(px - other.x, py - other.y))
    if not errors:
        return RpeResult(None, None, 0, 0)
    errors = np.array(errors)
    ok = errors <= fail_threshold
    failed = int((~ok).sum())
    rpe = float(errors[ok].mean()) if ok.any() else None
    return RpeResult(rpe, failed / len(errors), len(errors), failed)


def track_time(tracks):
    """Mean track lifetime in seconds."""
    if not tracks:
        raise ValueError("no tracks")
    return float(np.mean([(tr.death - tr.birth) * 1e-6 for tr in tracks]))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class MetricRow:
    sequence: str
    delta_t_ms: float
    rpe_px: float
    rfm: float
    matches: int
    failed: int
    fail_threshold_px: float
    track_time_s: float = None


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    @property
    def sequences(self):
        return list(dict.fromkeys(r.sequence for r in self.rows))

    @property
    def delta_ts(self):
        return sorted({r.delta_t_ms for r in self.rows})

    def mean_track_time(self):
        vals = {r.sequence: r.track_time_s for r in self.rows if r.track_time_s is not None}
        return float(np.mean(list(vals.values()))) if vals else None

    def pooled(self, delta_t_ms):
        """Pool matches of every sequence at one delta-t."""
        rows = [r for r in self.rows if r.delta_t_ms == delta_t_ms]
        matches = sum(r.matches for r in rows)
        failed = sum(r.failed for r in rows)
        if matches == 0:
            return None, None
        good = matches - failed
        err_sum = sum(r.rpe_px * (r.matches - r.failed) for r in rows if r.rpe_px is not None)
        return (err_sum / good if good else None), failed / matches


def evaluate(sequence, tracks, gt, delta_ts=DELTA_TS_MS, fail_threshold=FAIL_THRESHOLD_PX,
             tolerance_us=LOOKUP_TOL_US):
    """Metric rows for one sequence at every delta-t."""
    tt = track_time(tracks) if tracks else None
    rows = []
    for dt in delta_ts:
        res = compute_rpe(tracks, gt, dt, fail_threshold, tolerance_us)
        rows.append(MetricRow(sequence, dt, res.rpe, res.rfm, res.matches, res.failed,
                              fail_threshold, tt))
    return rows


def _fmt_dt(dt):
    return f"{dt:g}"


def _cell(rpe, rfm):
    if rfm is None:
        return "-"
    rpe_s = "-" if rpe is None else f"{rpe:.3f}"
    return f"{rpe_s} ({rfm:.3f})"


def _text_table(report: MetricsReport):
    dts = report.delta_ts
    header = ["sequence"] + [f"dt={_fmt_dt(dt)} ms" for dt in dts] + ["Track Time (s)"]
    sub = [""] + ["RPE (RFM)"] * len(dts) + [""]
    body = []
    for seq in report.sequences:
        rows = {r.delta_t_ms: r for r in report.rows if r.sequence == seq}
        tt = next(iter(rows.values())).track_time_s
        body.append([seq] + [_cell(rows[dt].rpe_px, rows[dt].rfm) if dt in rows else "-" for dt in dts]
                    + ["-" if tt is None else f"{tt:.3f}"])
    if len(report.sequences) > 1:
        mtt = report.mean_track_time()
        body.append(["all"] + [_cell(*report.pooled(dt)) for dt in dts]
                    + ["-" if mtt is None else f"{mtt:.3f}"])
    table = [header, sub] + body
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(2, "-+-".join("-" * w for w in widths))
    thr = {r.fail_threshold_px for r in report.rows}
    lines.append(f"fail threshold: {', '.join(f'{t:g}' for t in sorted(thr))} px")
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, fmt="text") -> bytes:
    if fmt == "text":
        return _text_table(report).encode()
    if fmt in ("json-lines", "jsonl"):
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in report.rows).encode()
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(data) -> MetricsReport:
    """Inverse of ``emit_report(..., "json-lines")``."""
    if isinstance(data, bytes):
        data = data.decode()
    return MetricsReport([MetricRow(**json.loads(line)) for line in data.splitlines() if line.strip()])


# ---------------------------------------------------------------------------
# trajectory plot
# ---------------------------------------------------------------------------


def plot_trajectories(tracks, width, height, title=None) -> str:
    """SVG document with one polyline per track, colours cycled by track id."""
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(width)}" height="{int(height)}" '
             f'viewBox="0 0 {int(width)} {int(height)}">',
             f'<rect width="{int(width)}" height="{int(height)}" fill="white"/>']
    if title:
        parts.append(f"<title>{escape(str(title))}</title>")
    for tr in tracks:
        pts = " ".join(f"{kp.x:.2f},{kp.y:.2f}" for kp in tr.observations)
        color = PALETTE[tr.id % len(PALETTE)]
        parts.append(f'<polyline data-track="{tr.id}" points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
