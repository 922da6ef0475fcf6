import hashlib
import io
import json

import numpy as np
import pytest

from evkp.cli import main, read_config
from evkp.events import read_events_binary
from evkp.heatmaps import read_heatmaps, write_heatmaps
from evkp.imageio import write_pgm
from evkp.losses import HeatmapSeq
from evkp.synth import dataset_digest, read_manifest
from evkp.tracker import TrackerParams, read_tracks, run_tracker

DETECT_DIGEST = "43ee4dfa122e355d2302bdf7f52cb8e4bd08ee2750b180a77e1f2193539986c2"


def textured(h=32, w=40, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    img = 0.5 + 0.3 * np.sin(xx / 3.0) * np.cos(yy / 4.0)
    return np.clip(img + 0.05 * rng.random((h, w)), 0, 1)


def run(*argv):
    buf = io.StringIO()
    code = main(list(argv), out=buf)
    return code, buf.getvalue()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    bases = root / "bases"
    bases.mkdir()
    for s in range(2):
        write_pgm(bases / f"b{s}.pgm", textured(seed=s))
    code, _ = run("synth", "--base-dir", str(bases), "--out-dir", str(root / "ds"),
                  "--m1", "40", "--m2", "10", "--seed", "4")
    assert code == 0
    return root


def test_synth_manifest_and_reproducible(dataset, tmp_path):
    rows = read_manifest(dataset / "ds")
    assert len(rows) == 2 * 40 // 10
    code, _ = run("synth", "--base-dir", str(dataset / "bases"), "--out-dir", str(tmp_path / "again"),
                  "--m1", "40", "--m2", "10", "--seed", "4")
    assert code == 0 and dataset_digest(tmp_path / "again") == dataset_digest(dataset / "ds")


def test_synth_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("synth", "--base-dir", str(tmp_path / "empty"), "--out-dir", str(tmp_path / "o"))[0] == 2
    assert run("synth", "--base-dir", str(tmp_path / "nope"), "--out-dir", str(tmp_path / "o"))[0] == 3
    assert run("synth", "--out-dir", str(tmp_path / "o"))[0] == 2
    write_pgm(tmp_path / "empty" / "a.pgm", textured())
    assert run("synth", "--base-dir", str(tmp_path / "empty"), "--out-dir", str(tmp_path / "o"),
               "--m1", "25", "--m2", "10")[0] == 2


def test_detect_writes_headers_and_golden(dataset, tmp_path):
    code, _ = run("detect", "--dataset", str(dataset / "ds"), "--out", str(tmp_path), "--n", "4")
    assert code == 0
    rows = read_manifest(dataset / "ds")
    h = hashlib.sha256()
    for sid, _, ev_path, _ in rows:
        seq = read_heatmaps(tmp_path / f"{sid}.fehm")
        ev = read_events_binary(ev_path)
        assert len(seq) == 4 and (seq.t0, seq.t1) == (ev.t_min, ev.t_max)
        vals = seq.maps[seq.maps > 0]
        assert np.all(vals > np.float32(0.95))
        h.update((tmp_path / f"{sid}.fehm").read_bytes())
    assert h.hexdigest() == DETECT_DIGEST


def test_detect_flat_frames_give_zeros(tmp_path):
    bases = tmp_path / "bases"
    bases.mkdir()
    write_pgm(bases / "flat.pgm", np.full((24, 24), 0.5))
    assert run("synth", "--base-dir", str(bases), "--out-dir", str(tmp_path / "ds"),
               "--m1", "20", "--m2", "10", "--translation", "0", "--rotation", "0",
               "--scale", "0")[0] == 0
    assert run("detect", "--dataset", str(tmp_path / "ds"), "--out", str(tmp_path / "hm"))[0] == 0
    files = sorted((tmp_path / "hm").glob("*.fehm"))
    assert len(files) == 2
    for f in files:
        assert not read_heatmaps(f).maps.any()


def test_detect_from_heatmap_files(dataset, tmp_path):
    rows = read_manifest(dataset / "ds")
    src = tmp_path / "src"
    src.mkdir()
    for sid, _, ev_path, _ in rows:
        ev = read_events_binary(ev_path)
        maps = np.full((3, 32, 40), 0.5)
        maps[:, 5, 6] = 0.99
        write_heatmaps(src / f"{sid}.fehm", HeatmapSeq(maps, ev.t_min, ev.t_max))
    assert run("detect", "--dataset", str(dataset / "ds"), "--out", str(tmp_path / "o"),
               "--source", "heatmap-files", "--heatmap-dir", str(src))[0] == 0
    seq = read_heatmaps(tmp_path / "o" / f"{rows[0][0]}.fehm")
    assert np.count_nonzero(seq.maps) == 3
    assert run("detect", "--dataset", str(dataset / "ds"), "--out", str(tmp_path / "o"),
               "--source", "heatmap-files")[0] == 2


def test_track_empty_and_radius_zero(tmp_path):
    write_heatmaps(tmp_path / "s_0001.fehm", HeatmapSeq(np.zeros((2, 8, 8)), 0, 1000))
    assert run("track", "--heatmaps", str(tmp_path / "s_0001.fehm"), "--out", str(tmp_path / "e.txt"))[0] == 0
    assert read_tracks(tmp_path / "e.txt") == []
    maps = np.zeros((3, 8, 8))
    for k in range(3):
        maps[k, 2, k] = 0.99  # moves one pixel per map
    write_heatmaps(tmp_path / "m.fehm", HeatmapSeq(maps, 0, 3000))
    assert run("track", "--heatmaps", str(tmp_path / "m.fehm"), "--out", str(tmp_path / "r0.txt"),
               "--radius", "0")[0] == 0
    assert len(read_tracks(tmp_path / "r0.txt")) == 3
    assert run("track", "--heatmaps", str(tmp_path / "m.fehm"), "--out", str(tmp_path / "r4.txt"))[0] == 0
    assert len(read_tracks(tmp_path / "r4.txt")) == 1


def test_track_matches_library(tmp_path):
    rng = np.random.default_rng(0)
    seqs = []
    for k in range(3):
        maps = np.where(rng.random((4, 16, 16)) > 0.97, rng.uniform(0.95, 1.0, (4, 16, 16)), 0.0)
        seqs.append(HeatmapSeq(maps.astype(np.float32), k * 4000, (k + 1) * 4000))
        write_heatmaps(tmp_path / f"q_{k + 1:04d}.fehm", seqs[-1])
    assert run("track", "--heatmaps", str(tmp_path), "--out", str(tmp_path / "out"))[0] == 0
    got = read_tracks(tmp_path / "out" / "q.tracks.txt")
    loaded = [read_heatmaps(tmp_path / f"q_{k + 1:04d}.fehm") for k in range(3)]
    ref = run_tracker(loaded, TrackerParams(threshold=float(np.float32(0.95))))
    assert [(t.id, t.observations) for t in got] == [(t.id, t.observations) for t in ref]
    assert len(got) > 0


def test_eval_table_and_jsonl(dataset, tmp_path):
    hm, tr, rep = tmp_path / "hm", tmp_path / "tr", tmp_path / "rep"
    assert run("detect", "--dataset", str(dataset / "ds"), "--out", str(hm))[0] == 0
    assert run("track", "--heatmaps", str(hm), "--out", str(tr))[0] == 0
    assert sorted(p.name for p in tr.iterdir()) == ["seq0000.tracks.txt", "seq0001.tracks.txt"]
    code, text = run("eval", "--tracks", str(tr), "--gt", str(dataset / "ds"), "--delta-t", "5,10",
                     "--plot", "--out", str(rep))
    assert code == 0
    assert "RPE (RFM)" in text and "dt=5 ms" in text and "dt=10 ms" in text
    assert (rep / "report.txt").read_text() == text
    lines = (rep / "report.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 2
    assert {json.loads(x)["delta_t_ms"] for x in lines} == {5, 10}
    assert (rep / "seq0000.svg").read_text().startswith("<svg")


def test_eval_missing_inputs(dataset, tmp_path):
    assert run("eval", "--tracks", str(tmp_path / "none"), "--gt", str(dataset / "ds"))[0] == 3
    # no ground truth for sequence "zz" in the dataset
    (tmp_path / "zz.tracks.txt").write_text("0,1,1.0,1.0,0.99\n")
    assert run("eval", "--tracks", str(tmp_path / "zz.tracks.txt"), "--gt", str(dataset / "ds"))[0] == 3
    # gt is on a 1 ms grid; t = 500 us is 500 us from it, beyond the 100 us tolerance
    (tmp_path / "seq0000.tracks.txt").write_text("0,500,1.0,1.0,0.99\n0,25500,1.0,1.0,0.99\n")
    assert run("eval", "--tracks", str(tmp_path / "seq0000.tracks.txt"), "--gt", str(dataset / "ds"),
               "--gt-tolerance-us", "100")[0] == 3
    (tmp_path / "bad.tracks.txt").write_text("0,1,x,1.0,0.99\n")
    assert run("eval", "--tracks", str(tmp_path / "bad.tracks.txt"), "--gt", str(dataset / "ds"))[0] == 3


def test_losscheck_exit_codes():
    code, text = run("losscheck")
    assert code == 0 and len(text.splitlines()) == 11
    code, text = run("losscheck", "--corrupt-gradient")
    assert code == 1 and "FAIL" in text.upper()


def test_read_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nfail-threshold = 5  # px\nDELTA_T=25\n\n")
    assert read_config(p) == {"fail_threshold": "5", "delta_t": "25"}


def test_config_overrides_and_cli_wins(tmp_path):
    maps = np.zeros((3, 8, 8))
    for k in range(3):
        maps[k, 2, k] = 0.99
    write_heatmaps(tmp_path / "m.fehm", HeatmapSeq(maps, 0, 3000))
    cfg = tmp_path / "t.cfg"
    cfg.write_text("radius=0\n")
    assert run("track", "--config", str(cfg), "--heatmaps", str(tmp_path / "m.fehm"),
               "--out", str(tmp_path / "a.txt"))[0] == 0
    assert len(read_tracks(tmp_path / "a.txt")) == 3
    assert run("track", "--config", str(cfg), "--heatmaps", str(tmp_path / "m.fehm"),
               "--out", str(tmp_path / "b.txt"), "--radius", "4")[0] == 0
    assert len(read_tracks(tmp_path / "b.txt")) == 1
    cfg.write_text("radius=0\nbogus=1\n")
    assert run("track", "--config", str(cfg), "--heatmaps", str(tmp_path / "m.fehm"),
               "--out", str(tmp_path / "c.txt"))[0] == 2
    cfg.write_text("nms=yes\n")
    assert run("track", "--config", str(cfg), "--heatmaps", str(tmp_path / "m.fehm"),
               "--out", str(tmp_path / "d.txt"))[0] == 0


def test_unknown_command_is_usage_error():
    assert run("frobnicate")[0] == 2
    assert run("track", "--radius", "abc")[0] == 2
