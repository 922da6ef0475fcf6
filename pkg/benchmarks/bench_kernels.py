"""Time the numba and numpy flavours of each kernel side by side.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Both flavours are called directly, so ``EVKP_DISABLE_NUMBA`` does not matter
here. The first numba call (compilation, or loading the on-disk cache) is
excluded from the timings and reported separately.
"""
import argparse
import time

import numpy as np

from evkp import kernels
from evkp._accel import HAS_NUMBA
from evkp.geometry import HomographyBounds, _warp_plan, sample_homography
from evkp.synth import LOG_EPS


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(scale, rng):
    n = int(200_000 * scale)
    h, w, bins = 180, 240, 5
    voxel = (np.sort(rng.uniform(0, bins - 1, n)), rng.integers(0, w, n), rng.integers(0, h, n),
             rng.choice([-1.0, 1.0], n), bins, h, w)

    frames = int(max(2, 20 * scale))
    logs = np.log(rng.uniform(0.01, 1.0, (frames, 90, 120)) + LOG_EPS)
    sim = (logs, np.arange(frames, dtype=np.float64) * 1000.0, 0.2)

    side = int(48 * max(scale, 0.25))
    x = rng.normal(size=(16, side, side))
    weight = rng.normal(size=(16, 16, 3, 3)) / 12.0
    deform = (x, weight, np.zeros(16), rng.normal(0, 1.5, (18, side, side)))

    img = rng.random((480, 640))
    T = sample_homography(HomographyBounds(5.0, 0.05, 0.05, 1e-4), rng, center=(320, 240))
    plan = _warp_plan(T, img.shape)
    warp = (img, plan.idx, plan.weights)

    return {
        f"voxel_accumulate ({n} events)": ("voxel_accumulate", voxel),
        f"simulate ({frames} frames 120x90)": ("simulate", sim),
        f"deform_conv (16->16 ch {side}x{side})": ("deform_conv", deform),
        "warp_gather (640x480)": ("warp_gather", warp),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="problem size multiplier")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    if not HAS_NUMBA:
        print("numba not installed: only the numpy flavour is timed")
    print(f"{'kernel':40s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s} {'jit s':>7s}")
    for label, (name, call_args) in cases(args.scale, rng).items():
        t_np = best_of(getattr(kernels, name + "_np"), call_args, args.repeat)
        if HAS_NUMBA:
            nb = getattr(kernels, name + "_nb")
            t0 = time.perf_counter()
            nb(*call_args)
            t_jit = time.perf_counter() - t0
            t_nb = best_of(nb, call_args, args.repeat)
            print(f"{label:40s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:7.1f}x {t_jit:7.2f}")
        else:
            print(f"{label:40s} {t_np:10.4f} {'-':>10s} {'-':>8s} {'-':>7s}")


if __name__ == "__main__":
    main()
