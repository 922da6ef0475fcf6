"""Hot inner loops, each in a numba flavour (``*_nb``) and a numpy flavour (``*_np``).

The public names dispatch on :data:`evkp._accel.USE_NUMBA`. Both flavours take
and return the same arrays; the voxel and simulator kernels are bitwise equal
across flavours, deformable convolution agrees to rounding.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# voxel grid accumulation
# ---------------------------------------------------------------------------


@njit
def voxel_accumulate_nb(t_star, xs, ys, ps, bins, height, width):
    grid = np.zeros((bins, height, width), dtype=np.float64)
    n = t_star.shape[0]
    # two passes (lower bin, then upper bin) to match the numpy add order
    for i in range(n):
        ts = t_star[i]
        b0 = int(math.floor(ts))
        w0 = max(0.0, 1.0 - abs(b0 - ts))
        grid[b0, ys[i], xs[i]] += ps[i] * w0
    for i in range(n):
        ts = t_star[i]
        b1 = int(math.floor(ts)) + 1
        if b1 < bins:
            w1 = max(0.0, 1.0 - abs(b1 - ts))
            grid[b1, ys[i], xs[i]] += ps[i] * w1
    return grid


def voxel_accumulate_np(t_star, xs, ys, ps, bins, height, width):
    grid = np.zeros((bins, height, width), dtype=np.float64)
    b0 = np.floor(t_star).astype(np.int64)
    w0 = np.maximum(0.0, 1.0 - np.abs(b0 - t_star))
    np.add.at(grid, (b0, ys, xs), ps * w0)
    b1 = b0 + 1
    keep = b1 < bins
    w1 = np.maximum(0.0, 1.0 - np.abs(b1[keep] - t_star[keep]))
    np.add.at(grid, (b1[keep], ys[keep], xs[keep]), ps[keep] * w1)
    return grid


# ---------------------------------------------------------------------------
# log-intensity event simulator
# ---------------------------------------------------------------------------


@njit
def simulate_nb(logs, times, threshold):
    # two passes over the same crossings: count, then fill. Growing the output
    # arrays inside the loop was ~10x slower than this.
    n_frames, height, width = logs.shape
    npix = height * width
    flat = logs.reshape(n_frames, npix)
    ref = flat[0].copy()
    count = 0
    for f in range(1, n_frames):
        for k in range(npix):
            la = flat[f - 1, k]
            lb = flat[f, k]
            if lb == la:
                continue
            sign = 1.0 if lb > la else -1.0
            while sign * (lb - ref[k]) >= threshold:
                ref[k] = ref[k] + sign * threshold
                count += 1
    out_t = np.empty(count, dtype=np.float64)
    out_pix = np.empty(count, dtype=np.int64)
    out_p = np.empty(count, dtype=np.int8)
    ref = flat[0].copy()
    i = 0
    for f in range(1, n_frames):
        ta = times[f - 1]
        span = times[f] - ta
        for k in range(npix):
            la = flat[f - 1, k]
            lb = flat[f, k]
            if lb == la:
                continue
            sign = 1.0 if lb > la else -1.0
            while sign * (lb - ref[k]) >= threshold:
                level = ref[k] + sign * threshold
                frac = (level - la) / (lb - la)
                if frac < 0.0:
                    frac = 0.0
                elif frac > 1.0:
                    frac = 1.0
                out_t[i] = ta + frac * span
                out_pix[i] = k
                out_p[i] = 1 if sign > 0 else -1
                i += 1
                ref[k] = level
    return out_t, out_pix, out_p, ref.reshape(height, width)


def simulate_np(logs, times, threshold):
    n_frames, height, width = logs.shape
    flat = logs.reshape(n_frames, -1)
    ref = flat[0].copy()
    ts, pix, pol = [], [], []
    for f in range(1, n_frames):
        ta = times[f - 1]
        span = times[f] - ta
        la = flat[f - 1]
        lb = flat[f]
        sign = np.sign(lb - la)
        active = np.flatnonzero((sign != 0) & (sign * (lb - ref) >= threshold))
        while active.size:
            s = sign[active]
            level = ref[active] + s * threshold
            frac = np.clip((level - la[active]) / (lb[active] - la[active]), 0.0, 1.0)
            ts.append(ta + frac * span)
            pix.append(active)
            pol.append(s.astype(np.int8))
            ref[active] = level
            active = active[s * (lb[active] - ref[active]) >= threshold]
    if ts:
        out_t = np.concatenate(ts)
        out_pix = np.concatenate(pix).astype(np.int64)
        out_p = np.concatenate(pol)
    else:
        out_t = np.empty(0)
        out_pix = np.empty(0, dtype=np.int64)
        out_p = np.empty(0, dtype=np.int8)
    return out_t, out_pix, out_p, ref.reshape(height, width)


# ---------------------------------------------------------------------------
# deformable convolution (no modulation)
# ---------------------------------------------------------------------------


@njit
def _bilinear_nb(img, px, py):
    height, width = img.shape
    x0 = math.floor(px)
    y0 = math.floor(py)
    fx = px - x0
    fy = py - y0
    acc = 0.0
    for dy in range(2):
        yy = y0 + dy
        if yy < 0 or yy >= height:
            continue
        wy = fy if dy else 1.0 - fy
        for dx in range(2):
            xx = x0 + dx
            if xx < 0 or xx >= width:
                continue
            wx = fx if dx else 1.0 - fx
            acc += wy * wx * img[yy, xx]
    return acc


@njit
def deform_conv_nb(x, weight, bias, offsets):
    n_in, height, width = x.shape
    n_out, _, k, _ = weight.shape
    r = k // 2
    out = np.zeros((n_out, height, width), dtype=np.float64)
    cols = np.empty(n_in, dtype=np.float64)
    for yy in range(height):
        for xx in range(width):
            for ky in range(k):
                for kx in range(k):
                    tap = ky * k + kx
                    px = xx + kx - r + offsets[2 * tap, yy, xx]
                    py = yy + ky - r + offsets[2 * tap + 1, yy, xx]
                    for c in range(n_in):
                        cols[c] = _bilinear_nb(x[c], px, py)
                    for o in range(n_out):
                        acc = 0.0
                        for c in range(n_in):
                            acc += weight[o, c, ky, kx] * cols[c]
                        out[o, yy, xx] += acc
    for o in range(n_out):
        out[o] += bias[o]
    return out


def bilinear_gather_np(x, px, py):
    """Sample every channel of ``x`` (C, H, W) at float coords ``px``/``py`` with zero padding."""
    _, height, width = x.shape
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    out = np.zeros((x.shape[0],) + px.shape, dtype=np.float64)
    for dy in (0, 1):
        yy = y0 + dy
        wy = fy if dy else 1.0 - fy
        for dx in (0, 1):
            xx = x0 + dx
            wx = fx if dx else 1.0 - fx
            inside = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
            vals = x[:, np.clip(yy, 0, height - 1), np.clip(xx, 0, width - 1)]
            out += np.where(inside, wy * wx, 0.0) * vals
    return out


def deform_conv_np(x, weight, bias, offsets):
    _, height, width = x.shape
    n_out, _, k, _ = weight.shape
    r = k // 2
    gy, gx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((n_out, height, width), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            tap = ky * k + kx
            px = gx + (kx - r) + offsets[2 * tap]
            py = gy + (ky - r) + offsets[2 * tap + 1]
            sampled = bilinear_gather_np(x, px, py)
            out += np.einsum("oc,chw->ohw", weight[:, :, ky, kx], sampled)
    return out + bias[:, None, None]


# ---------------------------------------------------------------------------
# bilinear gather for homography warps
# ---------------------------------------------------------------------------


@njit
def warp_gather_nb(img, idx, weights):
    flat = img.ravel()
    width = img.shape[1]
    n = idx.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        j = idx[i]
        out[i] = (weights[0, i] * flat[j] + weights[1, i] * flat[j + 1]
                  + weights[2, i] * flat[j + width] + weights[3, i] * flat[j + width + 1])
    return out


def warp_gather_np(img, idx, weights):
    flat = img.ravel()
    width = img.shape[1]
    return (weights[0] * flat[idx] + weights[1] * flat[idx + 1]
            + weights[2] * flat[idx + width] + weights[3] * flat[idx + width + 1])


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    voxel_accumulate = voxel_accumulate_nb
    simulate = simulate_nb
    deform_conv = deform_conv_nb
    warp_gather = warp_gather_nb
else:
    voxel_accumulate = voxel_accumulate_np
    simulate = simulate_np
    deform_conv = deform_conv_np
    warp_gather = warp_gather_np
