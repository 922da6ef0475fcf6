"""``evkp`` command line: synth, detect, track, eval, losscheck.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 I/O error.
Every command also takes ``--config FILE`` with flat ``key=value`` lines
(``#`` starts a comment); keys are the long flag names, explicit flags win.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from . import evalkit, losscheck
from .events import build_voxel_grid, read_events_binary
from .geometry import HomographyBounds
from .heatmaps import read_heatmaps, write_heatmaps
from .imageio import read_pgm
from .losses import HeatmapSeq
from .synth import ConfigError, SynthConfig, build_dataset, read_manifest
from .tracker import TrackerParams, baseline_heatmaps, read_tracks, run_tracker, write_tracks

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _config_error(msg):
    return CliError(msg, EXIT_CONFIG)


def _io_error(msg):
    return CliError(msg, EXIT_IO)


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _ms_list(text):
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad delta-t list {text!r}") from None
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("delta-t values must be positive")
    return vals


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _config_error(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------


def read_config(path):
    """Parse ``key=value`` lines into a dict with keys normalized to ``snake_case``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise _io_error(f"cannot read config {path}: {exc}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise _config_error(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_").lower()] = value
    return out


def _apply_config(parser, argv, values):
    """Re-parse ``argv`` with config values as defaults, converted by each action's type."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise _config_error(f"unknown config key(s): {', '.join(unknown)}")
    defaults = {}
    for key, raw in values.items():
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction):
            conv = _bool
        else:
            conv = act.type or str
        try:
            val = conv(raw)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise _config_error(f"config key {key}: {exc}") from None
        if act.choices is not None and val not in act.choices:
            raise _config_error(f"config key {key}: {val!r} not in {list(act.choices)}")
        defaults[key] = val
    parser.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise _io_error(f"{what} {p} is not a directory")
    return p


def cmd_synth(args, out=sys.stdout):
    base_dir = _require_dir(args.base_dir, "base dir")
    paths = sorted(base_dir.glob("*.pgm"))
    if not paths:
        raise _config_error(f"no .pgm images in {base_dir}")
    try:
        bounds = HomographyBounds(args.translation, args.rotation, args.scale, args.perspective)
        cfg = SynthConfig(m1=args.m1, m2=args.m2, contrast_threshold=args.contrast, fps=args.fps,
                          noise_rate=args.noise_rate, seed=args.seed, m3=args.m3, bounds=bounds)
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    try:
        bases = [read_pgm(p) for p in paths]
    except (OSError, ValueError) as exc:
        raise _io_error(f"cannot read base image: {exc}") from None
    try:
        samples = build_dataset(bases, cfg, args.out_dir)
    except ConfigError as exc:
        raise _config_error(str(exc)) from None
    print(f"wrote {len(samples)} samples from {len(bases)} base images to {args.out_dir}", file=out)
    return EXIT_OK


def _threshold_maps(seq: HeatmapSeq, threshold):
    maps = np.where(seq.maps > threshold, seq.maps, 0.0)
    return HeatmapSeq(maps, seq.t0, seq.t1)


def cmd_detect(args, out=sys.stdout):
    if args.n < 1:
        raise _config_error("--n must be >= 1")
    if args.source == "heatmap-files" and not args.heatmap_dir:
        raise _config_error("--source heatmap-files needs --heatmap-dir")
    try:
        rows = read_manifest(_require_dir(args.dataset, "dataset"))
    except OSError as exc:
        raise _io_error(f"cannot read manifest: {exc}") from None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seqs = {}
    for sid, frame_path, ev_path, _ in rows:
        try:
            if args.source == "baseline":
                frame = read_pgm(frame_path)
                events = read_events_binary(ev_path)
                seq = baseline_heatmaps(frame, build_voxel_grid(events, args.bins), args.n,
                                        events.t_min, events.t_max, peak_normalize=not args.raw)
            else:
                seq = read_heatmaps(Path(args.heatmap_dir) / f"{sid}.fehm")
        except (OSError, ValueError) as exc:
            raise _io_error(f"{sid}: {exc}") from None
        seqs[sid] = _threshold_maps(seq, args.threshold)
    for sid, seq in seqs.items():
        write_heatmaps(out_dir / f"{sid}.fehm", seq)
    print(f"wrote {len(seqs)} heatmap files to {out_dir}", file=out)
    return EXIT_OK


def _sequence_of(sample_id):
    return sample_id.rsplit("_", 1)[0] if "_" in sample_id else sample_id


def _heatmap_groups(path):
    p = Path(path)
    if p.is_file():
        return {p.name.split(".")[0]: [p]}
    if not p.is_dir():
        raise _io_error(f"no heatmap file or directory at {p}")
    groups = {}
    for f in sorted(p.glob("*.fehm")):
        groups.setdefault(_sequence_of(f.stem), []).append(f)
    return groups


def cmd_track(args, out=sys.stdout):
    if args.radius < 0 or args.window_ms < 0:
        raise _config_error("radius and window must be >= 0")
    # heatmap files hold float32, so compare against the float32 threshold
    params = TrackerParams(radius=args.radius, window_us=int(round(args.window_ms * 1000)),
                           threshold=float(np.float32(args.threshold)), nms=args.nms)
    groups = _heatmap_groups(args.heatmaps)
    results = {}
    for name, files in groups.items():
        try:
            seqs = [read_heatmaps(f) for f in files]
        except (OSError, ValueError) as exc:
            raise _io_error(str(exc)) from None
        seqs.sort(key=lambda s: s.t0)
        try:
            results[name] = run_tracker(seqs, params)
        except ValueError as exc:
            raise _io_error(f"{name}: {exc}") from None
    out_path = Path(args.out)
    if Path(args.heatmaps).is_file() and out_path.suffix:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        (name, tracks), = results.items()
        write_tracks(out_path, tracks)
    else:
        out_path.mkdir(parents=True, exist_ok=True)
        for name, tracks in results.items():
            write_tracks(out_path / f"{name}.tracks.txt", tracks)
    n_tracks = sum(len(t) for t in results.values())
    print(f"{n_tracks} tracks over {len(results)} sequences", file=out)
    return EXIT_OK


def _track_files(path):
    p = Path(path)
    if p.is_file():
        return {p.name.split(".")[0]: p}
    if not p.is_dir():
        raise _io_error(f"no track file or directory at {p}")
    return {f.name[:-len(".tracks.txt")]: f for f in sorted(p.glob("*.tracks.txt"))}


def _gt_for(gt_path, seq, tol):
    p = Path(gt_path)
    if p.is_dir():
        p = p / "sequences" / f"{seq}.gt.txt"
    try:
        return evalkit.GroundTruth.from_file(p, tol)
    except (OSError, ValueError) as exc:
        raise _io_error(f"ground truth for {seq}: {exc}") from None


def _extent(tracks):
    xs = [kp.x for tr in tracks for kp in tr.observations] or [0.0]
    ys = [kp.y for tr in tracks for kp in tr.observations] or [0.0]
    return int(np.ceil(max(xs))) + 1, int(np.ceil(max(ys))) + 1


def cmd_eval(args, out=sys.stdout):
    if args.fail_threshold <= 0:
        raise _config_error("--fail-threshold must be > 0")
    files = _track_files(args.tracks)
    if not files:
        raise _io_error(f"no track files under {args.tracks}")
    report = evalkit.MetricsReport()
    plots = {}
    for seq, path in files.items():
        try:
            tracks = read_tracks(path)
        except (OSError, ValueError) as exc:
            raise _io_error(str(exc)) from None
        gt = _gt_for(args.gt, seq, args.gt_tolerance_us)
        try:
            report.rows.extend(evalkit.evaluate(seq, tracks, gt, args.delta_t, args.fail_threshold,
                                                args.gt_tolerance_us))
        except evalkit.MissingGroundTruthError as exc:
            raise _io_error(f"{seq}: {exc}") from None
        if args.plot:
            plots[seq] = evalkit.plot_trajectories(tracks, *_extent(tracks), title=seq)
    text = evalkit.emit_report(report, "text")
    out.write(text.decode())
    if args.out:
        od = Path(args.out)
        od.mkdir(parents=True, exist_ok=True)
        (od / "report.txt").write_bytes(text)
        (od / "report.jsonl").write_bytes(evalkit.emit_report(report, "json-lines"))
        for seq, svg in plots.items():
            (od / f"{seq}.svg").write_text(svg)
    elif plots:
        print("--plot needs --out; plots not written", file=sys.stderr)
    return EXIT_OK


def cmd_losscheck(args, out=sys.stdout):
    if args.size < 2 or not 1 <= args.patches <= args.size:
        raise _config_error("need 1 <= --patches <= --size")
    results = losscheck.run_losscheck(args.seed, args.size, args.patches,
                                      corrupt_gradient=args.corrupt_gradient)
    for r in results:
        print(r.line(), file=out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="evkp", description=__doc__.splitlines()[0].replace("``", ""))
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="build a synthetic dataset from base images")
    s.add_argument("--base-dir", required=False)
    s.add_argument("--out-dir", required=False)
    s.add_argument("--m1", type=int, default=300)
    s.add_argument("--m2", type=int, default=10)
    s.add_argument("--m3", type=int, default=None)
    s.add_argument("--contrast", type=float, default=0.2)
    s.add_argument("--fps", type=float, default=1000.0)
    s.add_argument("--noise-rate", type=float, default=0.0, help="noise events per pixel per second")
    s.add_argument("--translation", type=float, default=0.5)
    s.add_argument("--rotation", type=float, default=0.002)
    s.add_argument("--scale", type=float, default=0.002)
    s.add_argument("--perspective", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth, required_paths=("base_dir", "out_dir"))

    d = sub.add_parser("detect", help="write one heatmap sequence per sample")
    d.add_argument("--dataset")
    d.add_argument("--out")
    d.add_argument("--source", choices=("baseline", "heatmap-files"), default="baseline")
    d.add_argument("--heatmap-dir", default=None, help="input FEHM files for --source heatmap-files")
    d.add_argument("--n", type=int, default=10)
    d.add_argument("--bins", type=int, default=5, help="voxel bins for the baseline event gate")
    d.add_argument("--threshold", type=float, default=0.95)
    d.add_argument("--raw", action="store_true",
                   help="keep the gated baseline response unscaled (its peak is usually well below 1)")
    d.set_defaults(func=cmd_detect, required_paths=("dataset", "out"))

    t = sub.add_parser("track", help="track keypoints through heatmap sequences")
    t.add_argument("--heatmaps")
    t.add_argument("--out")
    t.add_argument("--radius", type=float, default=4.0)
    t.add_argument("--window-ms", type=float, default=12.0)
    t.add_argument("--threshold", type=float, default=0.95)
    t.add_argument("--nms", action="store_true")
    t.set_defaults(func=cmd_track, required_paths=("heatmaps", "out"))

    e = sub.add_parser("eval", help="RPE / RFM / track time against ground truth")
    e.add_argument("--tracks")
    e.add_argument("--gt", help="gt file or dataset directory")
    e.add_argument("--delta-t", type=_ms_list, default=list(evalkit.DELTA_TS_MS))
    e.add_argument("--fail-threshold", type=float, default=evalkit.FAIL_THRESHOLD_PX)
    e.add_argument("--gt-tolerance-us", type=int, default=evalkit.LOOKUP_TOL_US)
    e.add_argument("--plot", action="store_true")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval, required_paths=("tracks", "gt"))

    c = sub.add_parser("losscheck", help="run the loss invariant suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--size", type=int, default=64)
    c.add_argument("--patches", type=int, default=30)
    c.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_losscheck, required_paths=())

    for sp in (s, d, t, e, c):
        sp.add_argument("--config", default=None, help="key=value config file")
    return p, sub


def main(argv=None, out=sys.stdout):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser, sub = build_parser()
        args = parser.parse_args(argv)
        if args.config:
            command = args.command
            args = _apply_config(sub.choices[command], argv[1:], read_config(args.config))
            args.command = command
        missing = [k for k in args.required_paths if getattr(args, k) in (None, "")]
        if missing:
            raise _config_error("missing " + ", ".join("--" + k.replace("_", "-") for k in missing))
        return args.func(args, out)
    except CliError as exc:
        print(f"evkp: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
