"""Temporal-consistency, peaky and consistency-peaky losses plus their gradients.

All losses take 2-D heatmaps with values in [0, 1] and a :class:`PatchGrid`.
Consistency compares ``h_n`` with ``h_prev`` warped by ``T`` (the homography
from the earlier instant to the later one). Only patches that keep at least
half of their pixels after warping are scored, and the consistency-peaky term
uses that same patch set.

Gradient conventions: the max in a patch is differentiated at its first
row-major argmax, and the consistency mask is a constant (no gradient flows
through its min/max normalization).
"""
from dataclasses import dataclass

import numpy as np

from .geometry import PatchGrid, warp_adjoint, warp_bilinear

SIM_EPS = 1e-12
METRICS = ("cosine", "l1")

LR_INIT = 3e-4
ALPHA_INIT = 0.25
LR_DECAY = 0.75
ALPHA_GROWTH = 2.0
MILESTONES = (6, 12, 18)
STAGE_B = (3e-4, 2.0)


class NoValidPatchesError(ValueError):
    pass


@dataclass
class ConsistencyMap:
    values: np.ndarray
    grid: PatchGrid  # the valid patches the values refer to, same order


@dataclass
class LossReport:
    l_consist: float
    l_peaky: float
    l_cp: float
    l_total: float
    alpha: float
    consistency: np.ndarray
    mask: np.ndarray
    grid: PatchGrid


@dataclass
class HeatmapSeq:
    """N heatmaps of one frame interval; ``maps[-1]`` sits at the interval end."""

    maps: np.ndarray  # (N, H, W)
    t0: int
    t1: int

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3 or self.maps.shape[0] < 1:
            raise ValueError("heatmaps must be (N, H, W) with N >= 1")
        if self.t0 >= self.t1:
            raise ValueError("interval must satisfy t0 < t1")

    def __len__(self):
        return self.maps.shape[0]

    @property
    def timestamps(self):
        from .heatmaps import heatmap_timestamps
        return heatmap_timestamps(self.t0, self.t1, len(self))


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def _similarities(a, b, metric):
    """Row-wise similarity of two (K, P) arrays."""
    if metric == "cosine":
        na = np.sqrt(np.einsum("kp,kp->k", a, a))
        nb = np.sqrt(np.einsum("kp,kp->k", b, b))
        dots = np.einsum("kp,kp->k", a, b)
        if na.min() >= SIM_EPS and nb.min() >= SIM_EPS:
            return np.clip(dots / (na * nb), -1.0, 1.0)
        za, zb = na < SIM_EPS, nb < SIM_EPS
        denom = np.where(za | zb, 1.0, na * nb)
        out = np.clip(dots / denom, -1.0, 1.0)
        out = np.where(za | zb, 0.0, out)
        return np.where(za & zb, 1.0, out)
    if metric == "l1":
        return 1.0 - np.abs(a - b).sum(axis=1) / a.shape[1]
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def similarity(a, b, metric="cosine"):
    """Patch similarity, higher is more consistent.

    Cosine scores two all-zero patches as 1 and a single all-zero patch as 0.
    L1 is ``1 - mean|a - b|``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("patches differ in size")
    if a.size == 0:
        raise ValueError("empty patch")
    return float(_similarities(a[None], b[None], metric)[0])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _patch_stats(h, grid):
    return _stats_of(grid.extract(h).reshape(len(grid), -1))


def _stats_of(patches):
    """Per-patch (max - mean, mean).

    The gap is summed relative to the max so a constant patch gives exactly 0.
    """
    mx = patches.max(axis=1)
    gap = -(patches - mx[:, None]).sum(axis=1) / patches.shape[1]
    return gap, mx - gap


def _mean(v):
    return float(v.sum() / v.size)


def _peaky(gap):
    return 1.0 - _mean(gap)


def _cp(gap, mn, mask):
    return 1.0 - _mean(gap * mask) + _mean(mn * (1.0 - mask))


def _consistency(h_n, h_prev, T, grid, metric):
    h_n = np.asarray(h_n, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if h_n.shape != h_prev.shape:
        raise ValueError("heatmaps differ in shape")
    warped, mask = warp_bilinear(h_prev, T)
    valid = grid.valid_after(mask)
    if len(valid) == 0:
        raise NoValidPatchesError("no patch keeps enough valid pixels after warping")
    k = len(valid)
    a = valid.extract(h_n).reshape(k, -1)
    c = _similarities(a, valid.extract(warped).reshape(k, -1), metric)
    return 1.0 - _mean(c), ConsistencyMap(c, valid), a


def consistency_loss(h_n, h_prev, T, grid: PatchGrid, metric="cosine"):
    """Return ``(1 - mean_p C[p], ConsistencyMap)`` over the valid patches."""
    loss, cmap, _ = _consistency(h_n, h_prev, T, grid, metric)
    return loss, cmap


def peaky_loss(h, grid: PatchGrid):
    if len(grid) == 0:
        raise NoValidPatchesError("empty patch grid")
    return _peaky(_patch_stats(np.asarray(h, dtype=np.float64), grid)[0])


def normalize_mask(c):
    """Min-max normalize consistency values; a constant map gives all ones."""
    c = np.asarray(getattr(c, "values", c), dtype=np.float64)
    if c.size == 0:
        raise ValueError("empty consistency map")
    lo, hi = c.min(), c.max()
    if hi == lo:
        return np.ones_like(c)
    return (c - lo) / (hi - lo)


def cp_loss(h, mask, grid: PatchGrid):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (len(grid),):
        raise ValueError(f"mask has {mask.size} entries for {len(grid)} patches")
    if len(grid) == 0:
        raise NoValidPatchesError("empty patch grid")
    gap, mn = _patch_stats(np.asarray(h, dtype=np.float64), grid)
    return _cp(gap, mn, mask)


def total_loss(h_n, h_prev, T, grid, metric="cosine", alpha=ALPHA_INIT, mask=None) -> LossReport:
    """``L_consist + alpha * L_cp``; pass ``mask`` to freeze the consistency mask."""
    l_consist, cmap, patches = _consistency(h_n, h_prev, T, grid, metric)
    m = normalize_mask(cmap.values) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != cmap.values.shape:
        raise ValueError("mask does not match the valid patch count")
    gap, mn = _stats_of(patches)
    l_cp = _cp(gap, mn, m)
    return LossReport(l_consist=l_consist, l_peaky=_peaky(gap), l_cp=l_cp,
                      l_total=l_consist + alpha * l_cp, alpha=alpha,
                      consistency=cmap.values, mask=m, grid=cmap.grid)


def sequence_loss(maps, transforms, grid, metric="cosine", alpha=ALPHA_INIT):
    """Mean of :func:`total_loss` over consecutive pairs ``(n-1, n)``.

    ``transforms[i]`` maps instant i to instant i + 1.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if len(transforms) != len(maps) - 1 or len(maps) < 2:
        raise ValueError("need N >= 2 heatmaps and N - 1 transforms")
    reports = [total_loss(maps[n], maps[n - 1], transforms[n - 1], grid, metric, alpha)
               for n in range(1, len(maps))]
    return float(np.mean([r.l_total for r in reports])), reports


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _similarity_grads(a, b, c, metric):
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1, keepdims=True)
        nb = np.linalg.norm(b, axis=1, keepdims=True)
        degenerate = (na < SIM_EPS) | (nb < SIM_EPS)
        na = np.where(degenerate, 1.0, na)
        nb = np.where(degenerate, 1.0, nb)
        cc = c[:, None]
        da = b / (na * nb) - cc * a / na ** 2
        db = a / (na * nb) - cc * b / nb ** 2
        return np.where(degenerate, 0.0, da), np.where(degenerate, 0.0, db)
    if metric == "l1":
        s = np.sign(a - b) / a.shape[1]
        return -s, s
    raise ValueError(f"unknown metric {metric!r}")


def grad_total(h_n, h_prev, T, grid, metric="cosine", alpha=ALPHA_INIT, mask=None):
    """Analytic gradient of :func:`total_loss` w.r.t. ``h_n`` and ``h_prev``."""
    h_n = np.asarray(h_n, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    warped, wmask = warp_bilinear(h_prev, T)
    valid = grid.valid_after(wmask)
    k = len(valid)
    if k == 0:
        raise NoValidPatchesError("no patch keeps enough valid pixels after warping")
    m = valid.size
    a = valid.extract(h_n).reshape(k, -1)
    b = valid.extract(warped).reshape(k, -1)
    c = _similarities(a, b, metric)
    da, db = _similarity_grads(a, b, c, metric)

    # peaky part: -M_p/K at the argmax, (M_p + 1 - M_p)/(K * M^2) = 1/(K * M^2) everywhere
    cmask = normalize_mask(c) if mask is None else np.asarray(mask, dtype=np.float64)
    cp = np.full_like(a, 1.0 / (k * m * m))
    cp[np.arange(k), a.argmax(axis=1)] -= cmask / k

    g_a = -da / k + alpha * cp
    g_b = -db / k
    g_n = valid.scatter(g_a.reshape(k, m, m), h_n.shape)
    g_prev = warp_adjoint(valid.scatter(g_b.reshape(k, m, m), warped.shape), T, h_prev.shape)
    return g_n, g_prev


def _loss_value(T, grid, metric, alpha, mask):
    """Bare ``total_loss(...).l_total`` for a fixed mask, for tight loops."""
    mask = np.asarray(mask, dtype=np.float64)

    def f(h_n, h_prev):
        warped, wmask = warp_bilinear(h_prev, T)
        valid = grid.valid_after(wmask)
        k = len(valid)
        if mask.shape != (k,):
            raise ValueError("mask does not match the valid patch count")
        a = valid.extract(h_n).reshape(k, -1)
        c = _similarities(a, valid.extract(warped).reshape(k, -1), metric)
        return 1.0 - _mean(c) + alpha * _cp(*_stats_of(a), mask)

    return f


def finite_difference_grad(h_n, h_prev, T, grid, metric="cosine", alpha=ALPHA_INIT,
                           mask=None, step=1e-5):
    """Central differences of :func:`total_loss` over every pixel of both heatmaps.

    The consistency mask is frozen at its value for the unperturbed input so
    the result is comparable with :func:`grad_total`.
    """
    h_n = np.array(h_n, dtype=np.float64)
    h_prev = np.array(h_prev, dtype=np.float64)
    if mask is None:
        mask = total_loss(h_n, h_prev, T, grid, metric, alpha).mask

    f = _loss_value(T, grid, metric, alpha, mask)

    grads = []
    for target in (h_n, h_prev):
        g = np.zeros_like(target)
        flat, gflat = target.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(h_n, h_prev)
            flat[i] = orig - step
            down = f(h_n, h_prev)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads[0], grads[1]


def argmax_tie_pixels(h, grid, tol):
    """Boolean map of pixels within ``tol`` of their patch max in patches whose top two are that close."""
    h = np.asarray(h, dtype=np.float64)
    out = np.zeros(h.shape, dtype=bool)
    for (x, y) in grid.origins:
        p = h[y:y + grid.size, x:x + grid.size]
        near = p >= p.max() - tol
        if near.sum() > 1:
            out[y:y + grid.size, x:x + grid.size] |= near
    return out


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


# ---------------------------------------------------------------------------
# training schedule
# ---------------------------------------------------------------------------


def schedule(epoch, stage="a"):
    """Learning rate and loss weight for an epoch.

    Stage ``"a"``: every milestone reached multiplies lr by 0.75 and alpha by 2.
    Stage ``"b"``: the fixed fine-tuning setting.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if stage == "b":
        return STAGE_B
    if stage != "a":
        raise ValueError(f"unknown stage {stage!r}")
    lr, alpha = LR_INIT, ALPHA_INIT
    for milestone in MILESTONES:
        if epoch >= milestone:
            lr *= LR_DECAY
            alpha *= ALPHA_GROWTH
    return lr, alpha
