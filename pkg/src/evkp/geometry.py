"""Planar homographies, bilinear inverse warping and the M x M patch partition.

Homographies are plain 3x3 float64 arrays normalized so ``h[2, 2] == 1``.
Pixel centers sit at integer coordinates.
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels

DET_EPS = 1e-12
W_EPS = 1e-12
# slack on the in-bounds test so that exact integer shifts survive roundoff
BOUNDS_EPS = 1e-9
MIN_PATCH_VALIDITY = 0.5


class SingularHomographyError(ValueError):
    pass


class PointAtInfinityError(ValueError):
    pass


def as_homography(m) -> np.ndarray:
    h = np.array(m, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(h)):
        raise SingularHomographyError("non-finite homography")
    if abs(h[2, 2]) < DET_EPS:
        raise SingularHomographyError("h22 is zero, cannot normalize")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= DET_EPS:
        raise SingularHomographyError("homography is singular")
    return h


def identity() -> np.ndarray:
    return np.eye(3)


def translation(tx, ty) -> np.ndarray:
    h = np.eye(3)
    h[0, 2] = tx
    h[1, 2] = ty
    return h


def compose(a, b) -> np.ndarray:
    """Homography that applies ``b`` first, then ``a``."""
    return as_homography(as_homography(a) @ as_homography(b))


def invert(a) -> np.ndarray:
    a = as_homography(a)
    return as_homography(np.linalg.inv(a))


def apply_point(a, pt):
    a = np.asarray(a, dtype=np.float64)
    x, y = float(pt[0]), float(pt[1])
    w = a[2, 0] * x + a[2, 1] * y + a[2, 2]
    if abs(w) <= W_EPS:
        raise PointAtInfinityError(f"point {pt} maps to infinity")
    return ((a[0, 0] * x + a[0, 1] * y + a[0, 2]) / w,
            (a[1, 0] * x + a[1, 1] * y + a[1, 2]) / w)


def apply_points(a, pts) -> np.ndarray:
    """Vectorized :func:`apply_point` over an (n, 2) array."""
    a = np.asarray(a, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    w = a[2, 0] * pts[:, 0] + a[2, 1] * pts[:, 1] + a[2, 2]
    if np.any(np.abs(w) <= W_EPS):
        raise PointAtInfinityError("point maps to infinity")
    x = (a[0, 0] * pts[:, 0] + a[0, 1] * pts[:, 1] + a[0, 2]) / w
    y = (a[1, 0] * pts[:, 0] + a[1, 1] * pts[:, 1] + a[1, 2]) / w
    return np.stack([x, y], axis=1)


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _WarpPlan:
    """Bilinear taps of an inverse warp.

    Output pixel i reads source pixels ``idx[i] + {0, 1, W, W + 1}`` (flat
    indices) with ``weights[:, i]``; weights are zero where ``mask`` is False.
    """

    idx: np.ndarray
    weights: np.ndarray
    mask: np.ndarray
    in_shape: tuple


def _warp_plan(T, in_shape, out_shape=None) -> _WarpPlan:
    T = np.ascontiguousarray(T, dtype=np.float64)
    out_shape = tuple(out_shape) if out_shape is not None else tuple(in_shape)
    return _cached_plan(T.tobytes(), tuple(in_shape), out_shape)


@lru_cache(maxsize=64)
def _cached_plan(t_bytes, in_shape, out_shape) -> _WarpPlan:
    T = np.frombuffer(t_bytes, dtype=np.float64).reshape(3, 3)
    in_h, in_w = in_shape
    out_h, out_w = out_shape
    if in_h < 2 or in_w < 2:
        raise ValueError("warp needs images of at least 2x2 pixels")
    inv = invert(T)
    gy, gx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    w = inv[2, 0] * gx + inv[2, 1] * gy + inv[2, 2]
    ok_w = np.abs(w) > W_EPS
    w = np.where(ok_w, w, 1.0)
    sx = (inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]) / w
    sy = (inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]) / w
    mask = (ok_w & (sx >= -BOUNDS_EPS) & (sx <= in_w - 1 + BOUNDS_EPS)
            & (sy >= -BOUNDS_EPS) & (sy <= in_h - 1 + BOUNDS_EPS))
    sx = np.where(mask, sx, 0.0)
    sy = np.where(mask, sy, 0.0)
    # last row/column sample with weight 1 on the far neighbor
    x0 = np.clip(np.floor(sx), 0, in_w - 2).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, in_h - 2).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    weights = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    weights = np.where(mask, weights, 0.0).reshape(4, -1)
    plan = _WarpPlan((y0 * in_w + x0).ravel(), weights, mask, (in_h, in_w))
    for arr in (plan.idx, plan.weights, plan.mask):
        arr.flags.writeable = False
    return plan


def warp_bilinear(img, T, out_shape=None):
    """Inverse-warp ``img`` by ``T``: ``out(x, y) = img(T^-1 (x, y))``.

    Returns the warped image and a boolean validity mask. Pixels whose source
    falls outside the input are 0 and masked out.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    plan = _warp_plan(T, img.shape, out_shape)
    out = kernels.warp_gather(img, plan.idx, plan.weights)
    return out.reshape(plan.mask.shape), plan.mask


def warp_adjoint(grad_out, T, in_shape):
    """Transpose of :func:`warp_bilinear` (as a linear map on the input image)."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    plan = _warp_plan(T, in_shape, grad_out.shape)
    g = grad_out.ravel()
    width = in_shape[1]
    out = np.zeros(in_shape[0] * width, dtype=np.float64)
    for k, shift in enumerate((0, 1, width, width + 1)):
        np.add.at(out, plan.idx + shift, plan.weights[k] * g)
    return out.reshape(in_shape)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


@dataclass
class PatchGrid:
    """Disjoint M x M patches in row-major order; ``origins`` rows are (x, y)."""

    size: int
    origins: np.ndarray
    validity: np.ndarray = field(default=None)

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.int64).reshape(-1, 2)
        if self.validity is None:
            self.validity = np.ones(len(self.origins))
        self.validity = np.asarray(self.validity, dtype=np.float64)

    def __len__(self):
        return len(self.origins)

    def subset(self, keep):
        sub = PatchGrid(self.size, self.origins[keep], self.validity[keep])
        cache = self.__dict__.get("_index_cache")
        if cache:
            sub._index_cache = {shape: idx[keep] for shape, idx in cache.items()}
        return sub

    def _flat_index(self, shape):
        cache = self.__dict__.setdefault("_index_cache", {})
        if shape not in cache:
            height, width = shape
            m = self.size
            if len(self.origins):
                x, y = self.origins.max(axis=0)
                if x + m > width or y + m > height:
                    raise ValueError("patch grid does not fit the image")
            rows = self.origins[:, 1, None, None] + np.arange(m)[None, :, None]
            cols = self.origins[:, 0, None, None] + np.arange(m)[None, None, :]
            cache[shape] = rows * width + cols
        return cache[shape]

    def extract(self, img) -> np.ndarray:
        """Stack patch pixels as a (n_patches, M, M) array."""
        img = np.ascontiguousarray(img)
        return img.ravel()[self._flat_index(img.shape)]

    def scatter(self, values, shape) -> np.ndarray:
        """Inverse of :meth:`extract`; pixels outside all patches stay 0."""
        out = np.zeros(shape, dtype=np.float64)
        m = self.size
        for (x, y), v in zip(self.origins, values):
            out[y:y + m, x:x + m] += v
        return out

    def with_validity(self, mask):
        frac = self.extract(np.asarray(mask, dtype=np.float64)).sum(axis=(1, 2)) / self.size ** 2
        return PatchGrid(self.size, self.origins, frac)

    def valid(self, min_fraction=MIN_PATCH_VALIDITY):
        return self.subset(self.validity >= min_fraction)

    def valid_after(self, mask, min_fraction=MIN_PATCH_VALIDITY):
        """Patches keeping at least ``min_fraction`` of mask-valid pixels, validity attached."""
        frac = self.extract(mask).sum(axis=(1, 2)) / self.size ** 2
        return PatchGrid(self.size, self.origins, frac).subset_from(self, frac >= min_fraction)

    def subset_from(self, parent, keep):
        """Like ``subset`` but reusing ``parent``'s cached indices."""
        cache = parent.__dict__.get("_index_cache")
        if cache:
            self._index_cache = cache
        return self.subset(keep)


def partition_patches(width, height, size) -> PatchGrid:
    if size < 1:
        raise ValueError("patch size must be >= 1")
    nx, ny = width // size, height // size
    origins = [(i * size, j * size) for j in range(ny) for i in range(nx)]
    return PatchGrid(size, np.array(origins, dtype=np.int64).reshape(-1, 2))


# ---------------------------------------------------------------------------
# random homographies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HomographyBounds:
    """Half-widths of the uniform perturbation ranges.

    ``rotation`` is in radians, ``scale`` is relative (1 +/- scale) and
    ``perspective`` bounds the two projective row entries.
    """

    translation: float = 0.0
    rotation: float = 0.0
    scale: float = 0.0
    perspective: float = 0.0

    def __post_init__(self):
        if min(self.translation, self.rotation, self.scale, self.perspective) < 0:
            raise ValueError("perturbation bounds must be non-negative")


def sample_homography(bounds: HomographyBounds, seed=None, center=None) -> np.ndarray:
    """Draw ``translation @ rotation @ scale @ perspective``.

    ``seed`` may be an int or a ``numpy.random.Generator``. When ``center`` is
    given, rotation/scale/perspective act about that point.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    # always draw the same number of values so the stream does not depend on bounds
    tx, ty, theta, s, px, py = rng.uniform(-1.0, 1.0, size=6)
    tx *= bounds.translation
    ty *= bounds.translation
    theta *= bounds.rotation
    s = 1.0 + s * bounds.scale
    px *= bounds.perspective
    py *= bounds.perspective
    c, sn = np.cos(theta), np.sin(theta)
    R = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
    S = np.diag([s, s, 1.0])
    P = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
    core = R @ S @ P
    if center is not None:
        cx, cy = center
        core = translation(cx, cy) @ core @ translation(-cx, -cy)
    return as_homography(translation(tx, ty) @ core)


# ---------------------------------------------------------------------------
# ground-truth file
# ---------------------------------------------------------------------------


def write_homographies(path, times, mats):
    with open(path, "w") as fh:
        for t, h in zip(times, mats):
            h = as_homography(h)
            vals = ",".join(repr(float(v)) for v in h.ravel()[:8])
            fh.write(f"{int(t)},{vals}\n")


def read_homographies(path):
    """Parse ``t_us,h00,...,h21`` lines into (times, (n, 3, 3) array)."""
    times, mats = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 9:
                raise ValueError(f"{path}:{lineno}: expected 9 fields")
            times.append(int(parts[0]))
            mats.append(np.append(np.array(parts[1:], dtype=np.float64), 1.0).reshape(3, 3))
    return np.array(times, dtype=np.int64), np.array(mats).reshape(-1, 3, 3)
