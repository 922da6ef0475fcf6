import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evkp import kernels
from evkp.events import (BINARY_MAGIC, Event, EventSlice, InvalidIntervalError, OutOfRangeError,
                         build_voxel_grid, event_bin_weights, inject_noise, merge, normalize_time,
                         read_events_binary, read_events_text, write_events_binary,
                         write_events_text)


def random_slice(rng, n, t_min=0, t_max=1000, width=16, height=12):
    t = np.sort(rng.integers(t_min, t_max, n, endpoint=True))
    return EventSlice(t, rng.integers(0, width, n), rng.integers(0, height, n),
                      rng.choice([-1, 1], n), t_min, t_max, width, height)


def naive_grid(ev, bins):
    # per-event loop straight from the bilinear-in-time definition
    g = np.zeros((bins, ev.height, ev.width))
    for e in ev:
        ts = (e.t - ev.t_min) / (ev.t_max - ev.t_min) * (bins - 1)
        for b in range(bins):
            g[b, e.y, e.x] += e.p * max(0.0, 1.0 - abs(b - ts))
    return g


def test_normalize_time_examples():
    assert normalize_time(100, 100, 900, 10) == 0.0
    assert normalize_time(900, 100, 900, 10) == 9.0
    assert normalize_time(500, 0, 1000, 10) == 4.5


def test_normalize_time_errors():
    with pytest.raises(InvalidIntervalError):
        normalize_time(5, 10, 10, 4)
    with pytest.raises(OutOfRangeError):
        normalize_time(11, 0, 10, 4)
    with pytest.raises(OutOfRangeError):
        normalize_time(-1, 0, 10, 4)


def test_single_event_bin_zero():
    ev = EventSlice.from_events([Event(0, 3, 4, 1)], 0, 1000, 8, 8)
    g = build_voxel_grid(ev, 10).values
    assert g[0, 4, 3] == 1.0
    g[0, 4, 3] = 0.0
    assert not g.any()


def test_single_event_midpoint_split():
    # t* = 250 / 1000 * 10 = 2.5 with B = 11
    ev = EventSlice.from_events([Event(250, 1, 2, 1)], 0, 1000, 4, 4)
    g = build_voxel_grid(ev, 11).values
    assert g[2, 2, 1] == 0.5 and g[3, 2, 1] == 0.5
    assert g.sum() == 1.0


def test_opposite_polarities_cancel():
    ev = EventSlice.from_events([Event(333, 1, 1, 1), Event(333, 1, 1, -1)], 0, 1000, 3, 3)
    assert not build_voxel_grid(ev, 7).values.any()


def test_event_at_t_max_fills_last_bin():
    ev = EventSlice.from_events([Event(1000, 0, 0, -1)], 0, 1000, 2, 2)
    g = build_voxel_grid(ev, 5).values
    assert g[4, 0, 0] == -1.0 and np.count_nonzero(g) == 1


def test_empty_slice_all_zero():
    g = build_voxel_grid(EventSlice.empty(0, 10, 5, 4), 3)
    assert g.values.shape == (3, 4, 5) and g.bins == 3 and g.width == 5 and g.height == 4
    assert not g.values.any()


def test_single_bin():
    rng = np.random.default_rng(3)
    ev = random_slice(rng, 200)
    g = build_voxel_grid(ev, 1).values
    ref = np.zeros((1, ev.height, ev.width))
    np.add.at(ref, (0, ev.y, ev.x), ev.p.astype(float))
    np.testing.assert_array_equal(g, ref)


def test_grid_matches_naive_loop():
    rng = np.random.default_rng(0)
    ev = random_slice(rng, 300)
    np.testing.assert_allclose(build_voxel_grid(ev, 6).values, naive_grid(ev, 6), atol=1e-12)


def test_superposition():
    rng = np.random.default_rng(1)
    a, b = random_slice(rng, 150), random_slice(rng, 90)
    both = build_voxel_grid(merge(a, b), 5).values
    np.testing.assert_allclose(both, build_voxel_grid(a, 5).values + build_voxel_grid(b, 5).values,
                               atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 10**6), st.integers(1, 64), st.data())
def test_bin_weights_sum_to_one(t_min, span, bins, data):
    t = data.draw(st.integers(t_min, t_min + span))
    ts = normalize_time(t, t_min, t_min + span, bins)
    assert 0.0 <= ts <= bins - 1
    lo, w_lo, hi, w_hi = event_bin_weights(np.array([ts]), bins)
    assert abs(w_lo[0] + w_hi[0] - 1.0) <= 1e-12
    assert lo[0] >= 0 and (w_hi[0] == 0.0 or hi[0] < bins)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    ev = random_slice(rng, 400)
    # same events, random order among equal timestamps
    shuffled = ev.select(np.lexsort((rng.permutation(len(ev)), ev.t)))
    np.testing.assert_array_equal(build_voxel_grid(ev, 8).values,
                                  build_voxel_grid(shuffled, 8).values)


def test_slice_invariants():
    with pytest.raises(InvalidIntervalError):
        EventSlice.empty(5, 5, 2, 2)
    with pytest.raises(ValueError):
        EventSlice([2, 1], [0, 0], [0, 0], [1, 1], 0, 10, 2, 2)
    with pytest.raises(OutOfRangeError):
        EventSlice([11], [0], [0], [1], 0, 10, 2, 2)
    with pytest.raises(OutOfRangeError):
        EventSlice([1], [2], [0], [1], 0, 10, 2, 2)
    with pytest.raises(ValueError):
        EventSlice([1], [0], [0], [0], 0, 10, 2, 2)


def test_inject_noise_zero_rate_identity():
    ev = random_slice(np.random.default_rng(2), 20)
    assert inject_noise(ev, 0.0, 7) is ev


def test_inject_noise_count_and_determinism():
    ev = random_slice(np.random.default_rng(2), 20, t_max=50_000, width=20, height=10)
    rate = 37.0
    expected = round(rate * 0.05 * 200)
    a = inject_noise(ev, rate, 11)
    b = inject_noise(ev, rate, 11)
    assert len(a) - len(ev) == expected == 370
    for col in ("t", "x", "y", "p"):
        np.testing.assert_array_equal(getattr(a, col), getattr(b, col))
    assert np.all(np.diff(a.t) >= 0)
    with pytest.raises(ValueError):
        inject_noise(ev, -1.0, 0)


def test_text_roundtrip(tmp_path):
    ev = random_slice(np.random.default_rng(4), 50)
    write_events_text(tmp_path / "ev.txt", ev)
    back = read_events_text(tmp_path / "ev.txt", ev.t_min, ev.t_max, ev.width, ev.height)
    assert list(back) == list(ev)
    first = (tmp_path / "ev.txt").read_text().splitlines()[0]
    assert first == f"{ev.t[0]},{ev.x[0]},{ev.y[0]},{ev.p[0]}"


def test_binary_roundtrip_and_layout(tmp_path):
    ev = random_slice(np.random.default_rng(5), 33, width=300, height=200)
    write_events_binary(tmp_path / "ev.bin", ev)
    raw = (tmp_path / "ev.bin").read_bytes()
    assert raw[:8] == BINARY_MAGIC == b"FEEVT\x00\x00\x00"
    assert raw[8:12] == (300).to_bytes(2, "little") + (200).to_bytes(2, "little")
    assert len(raw) == 12 + 13 * 33
    back = read_events_binary(tmp_path / "ev.bin", ev.t_min, ev.t_max)
    assert list(back) == list(ev) and (back.width, back.height) == (300, 200)


def test_binary_rejects_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOTEVENT" + b"\x00" * 4)
    with pytest.raises(ValueError):
        read_events_binary(tmp_path / "x.bin")


def test_voxel_kernels_agree_bitwise():
    rng = np.random.default_rng(9)
    ev = random_slice(rng, 5000)
    ts = (ev.t - ev.t_min) / (ev.t_max - ev.t_min) * 9.0
    args = (ts, ev.x, ev.y, ev.p.astype(float), 10, ev.height, ev.width)
    np.testing.assert_array_equal(kernels.voxel_accumulate_nb(*args), kernels.voxel_accumulate_np(*args))
