"""Forward-only numpy versions of the detector's fusion and propagation blocks.

Feature tensors are float64 arrays shaped (C, H, W). Convolutions are
cross-correlations with zero "same" padding and stride 1. Batch norm appears
in inference form, i.e. a per-channel ``scale * x + shift``.

Offset fields are (2K, H, W) with channel layout
``[dx_tap0, dy_tap0, dx_tap1, dy_tap1, ...]`` and taps in row-major kernel
order.
"""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

WEIGHTS_MAGIC = b"FEWTS"
LOGIT_CLIP = 36.0


@dataclass
class ConvWeights:
    weight: np.ndarray  # (out, in, k, k)
    bias: np.ndarray = None
    scale: np.ndarray = None
    shift: np.ndarray = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError("kernel must be (out, in, k, k)")
        if self.weight.shape[2] % 2 == 0:
            raise ValueError("kernel size must be odd")
        n_out = self.weight.shape[0]
        self.bias = np.zeros(n_out) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        self.scale = np.ones(n_out) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        self.shift = np.zeros(n_out) if self.shift is None else np.asarray(self.shift, dtype=np.float64)

    @property
    def ksize(self):
        return self.weight.shape[2]

    @classmethod
    def random(cls, n_out, n_in, k, rng, std=None, affine=False):
        std = 1.0 / np.sqrt(n_in * k * k) if std is None else std
        w = cls(rng.normal(0.0, std, (n_out, n_in, k, k)), rng.normal(0.0, 0.1, n_out))
        if affine:
            w.scale = rng.uniform(0.5, 1.5, n_out)
            w.shift = rng.normal(0.0, 0.1, n_out)
        return w

    @classmethod
    def identity(cls, channels, k=3):
        w = np.zeros((channels, channels, k, k))
        for c in range(channels):
            w[c, c, k // 2, k // 2] = 1.0
        return cls(w)


def _check(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("feature tensor must be (C, H, W)")
    return x


def affine(x, w: ConvWeights):
    return w.scale[:, None, None] * x + w.shift[:, None, None]


def relu(x):
    return np.maximum(x, 0.0)


def conv2d(x, w: ConvWeights):
    x = _check(x)
    n_out, n_in, k, _ = w.weight.shape
    if x.shape[0] != n_in:
        raise ValueError(f"expected {n_in} input channels, got {x.shape[0]}")
    r = k // 2
    _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (r, r), (r, r)))
    out = np.zeros((n_out, h, wd))
    for ky in range(k):
        for kx in range(k):
            out += np.einsum("oc,chw->ohw", w.weight[:, :, ky, kx], xp[:, ky:ky + h, kx:kx + wd])
    return out + w.bias[:, None, None]


def depthwise_conv(x, k):
    """Convolve channel c of ``x`` with ``k[c]`` (odd-sized, zero padding)."""
    x = _check(x)
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 3 or k.shape[0] != x.shape[0]:
        raise ValueError("need one 2-D kernel per channel")
    kh, kw = k.shape[1:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel size must be odd")
    _, h, w = x.shape
    ry, rx = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ry, ry), (rx, rx)))
    out = np.zeros_like(x)
    for ky in range(kh):
        for kx in range(kw):
            out += k[:, ky, kx, None, None] * xp[:, ky:ky + h, kx:kx + w]
    return out


def adaptive_avg_pool(x, out_h, out_w):
    x = _check(x)
    c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    if out_h > h or out_w > w:
        raise ValueError("output larger than input")
    ys = [(i * h) // out_h for i in range(out_h + 1)]
    xs = [(j * w) // out_w for j in range(out_w + 1)]
    out = np.empty((c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            out[:, i, j] = x[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(1, 2))
    return out


@dataclass
class DynamicFilterWeights:
    feature: ConvWeights  # 3x3 on the enhanced modality, with BN affine
    filter: ConvWeights   # 3x3 on the pooled guiding modality
    project: ConvWeights  # 1x1 output projection
    kernel_size: int = 3


def dynamic_filter_enhance(f_primary, f_other, weights: DynamicFilterWeights):
    """Enhance ``f_primary`` with per-channel kernels predicted from ``f_other``.

    ``Conv1x1(K * F + F)`` with ``F = ReLU(BN(Conv3x3(f_primary)))`` and
    ``K = Conv3x3(pool(f_other))``, the pooled map being kernel-sized. Swap
    the arguments (and weights) for the other direction.
    """
    f_primary = _check(f_primary)
    f_other = _check(f_other)
    if f_primary.shape[1:] != f_other.shape[1:]:
        raise ValueError("modalities must share spatial dimensions")
    feat = relu(affine(conv2d(f_primary, weights.feature), weights.feature))
    ks = weights.kernel_size
    kern = conv2d(adaptive_avg_pool(f_other, ks, ks), weights.filter)
    if kern.shape[0] != feat.shape[0]:
        raise ValueError("filter branch must emit one kernel per feature channel")
    return conv2d(depthwise_conv(feat, kern) + feat, weights.project)


def bilinear_sample(x, px, py, channel=0):
    """Bilinear read of ``x[channel]`` at (px, py); zero outside the image."""
    img = _check(x)[channel]
    h, w = img.shape
    x0, y0 = int(np.floor(px)), int(np.floor(py))
    fx, fy = px - x0, py - y0
    acc = 0.0
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                acc += wy * wx * img[yy, xx]
    return float(acc)


def deform_conv(x, w: ConvWeights, offsets):
    """Deformable convolution without modulation; bias added, no affine/ReLU."""
    x = _check(x)
    offsets = np.asarray(offsets, dtype=np.float64)
    n_out, n_in, k, _ = w.weight.shape
    if x.shape[0] != n_in:
        raise ValueError(f"expected {n_in} input channels, got {x.shape[0]}")
    if offsets.shape != (2 * k * k,) + x.shape[1:]:
        raise ValueError(f"offset field must be {(2 * k * k,) + x.shape[1:]}, got {offsets.shape}")
    return kernels.deform_conv(np.ascontiguousarray(x), np.ascontiguousarray(w.weight),
                               w.bias, np.ascontiguousarray(offsets))


def mah_propagate(f_end, offsets, weights, n):
    """Propagate the end-of-exposure feature backwards through time.

    ``weights[0]`` is the plain 3x3 conv producing ``F^(N-1)``; ``weights[i]``
    for i >= 1 is the deformable step that consumes ``offsets[i - 1]``.
    ``offsets`` is ordered ``Offset^(N-2), ..., Offset^0``. Returns
    ``[F^0, ..., F^(N-1)]``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(offsets) != n - 1:
        raise ValueError(f"need {n - 1} offset fields, got {len(offsets)}")
    if len(weights) != n:
        raise ValueError(f"need {n} weight sets, got {len(weights)}")
    feat = relu(affine(conv2d(f_end, weights[0]), weights[0]))
    out = [feat]
    for off, w in zip(offsets, weights[1:]):
        feat = relu(affine(deform_conv(feat, w, off), w))
        out.append(feat)
    return out[::-1]


def sigmoid(z):
    z = np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)
    return 1.0 / (1.0 + np.exp(-z))


def sigmoid_head(f, layers):
    """Conv stack (ReLU between layers) ending in one channel, then a logistic.

    Logits are clipped to +/-36 so the output stays strictly inside (0, 1).
    """
    z = _check(f)
    for i, w in enumerate(layers):
        z = conv2d(z, w)
        if i < len(layers) - 1:
            z = relu(z)
    if z.shape[0] != 1:
        raise ValueError("head must reduce to a single channel")
    return sigmoid(z[0])


# ---------------------------------------------------------------------------
# weight file
# ---------------------------------------------------------------------------


def save_weights(path, tensors):
    """Write ``{name: array}`` as FEWTS records (u32 name length, name, u32 rank, u32 dims, f32 data)."""
    chunks = [WEIGHTS_MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        key = name.encode()
        chunks.append(struct.pack("<I", len(key)) + key)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(WEIGHTS_MAGIC):
        raise ValueError(f"{path}: bad magic")
    pos = len(WEIGHTS_MAGIC)
    out = {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode()
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise ValueError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 4 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated record") from exc
    return out
