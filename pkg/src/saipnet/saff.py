"""Spectral adaptive feature fusion.

A guide feature predicts one K x K kernel per pixel (per group).  Softmax
over the taps makes the kernel low-pass (taps sum to 1); subtracting it from
the identity kernel makes it high-pass (taps sum to 0).  Low-pass kernels
smooth and upsample the coarse decoder feature through grouped sub-pixel
rearrangement; high-pass kernels extract detail from the fine skip feature;
a similarity-driven offset field then resamples the smooth branch before the
final sum.  The high-pass application uses the difference form
sum_q w_q (x_q - x_center), which is exactly zero on constant inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Module, Tensor, concat, sigmoid, softmax, sqrt
from .ops import Conv2d, bilinear_sample, conv2d, neighbors, pixel_shuffle


@dataclass
class KernelField:
    """Per-pixel kernels: weights (N, G, K*K, H, W), kind lowpass or highpass."""

    weights: Tensor
    kind: str

    @property
    def groups(self) -> int:
        return self.weights.shape[1]

    @property
    def ksize(self) -> int:
        return int(round(self.weights.shape[2] ** 0.5))


@dataclass
class OffsetField:
    """Per-pixel fractional displacements: offsets (N, 2, H, W) as (row, col)."""

    offsets: Tensor


def predict_lowpass_kernels(guide: Tensor, weight: Tensor, bias: Tensor, groups: int,
                            k: int = 3, stride: int = 1) -> KernelField:
    """Per-location softmax kernels from a 3x3 prediction head over the guide."""
    logits = conv2d(guide, weight, bias, stride=stride)
    n, ch, h, w = logits.shape
    if ch != groups * k * k:
        raise ValueError(f"prediction head emits {ch} channels, expected {groups}*{k * k}")
    field = softmax(logits.reshape(n, groups, k * k, h, w), axis=2)
    return KernelField(field, "lowpass")


def predict_highpass_kernels(guide: Tensor, weight: Tensor, bias: Tensor, k: int = 3) -> KernelField:
    """Identity-minus-softmax kernels; taps sum to zero at every location."""
    logits = conv2d(guide, weight, bias)
    n, ch, h, w = logits.shape
    if ch != k * k:
        raise ValueError(f"prediction head emits {ch} channels, expected {k * k}")
    sm = softmax(logits.reshape(n, 1, k * k, h, w), axis=2)
    center = np.zeros((1, 1, k * k, 1, 1), dtype=sm.data.dtype)
    center[0, 0, (k * k) // 2] = 1.0
    return KernelField(Tensor(center) - sm, "highpass")


def spatially_variant_conv(feature: Tensor, field: KernelField) -> Tensor:
    """Apply a per-pixel kernel field: (N, C, H, W) x (N, G, K², H, W) -> (N, G, C, H, W).

    Y[n,g,c,i,j] = sum_q W[n,g,q,i,j] * X[n,c,i+di(q),j+dj(q)] with replicate
    padding, taps accumulated in ascending q order.
    """
    n, c, h, w = feature.shape
    fw = field.weights
    if fw.shape[0] != n or fw.shape[3] != h or fw.shape[4] != w:
        raise ValueError(f"field resolution {fw.shape} does not match feature {feature.shape}")
    k = field.ksize
    nb = neighbors(feature, k)  # (N, C, K², H, W)
    out = None
    for q in range(k * k):
        term = fw[:, :, q].reshape(n, -1, 1, h, w) * nb[:, :, q].reshape(n, 1, c, h, w)
        out = term if out is None else out + term
    return out


def highpass_filter(feature: Tensor, field: KernelField) -> Tensor:
    """Apply a highpass field as sum_q w_q (x_q - x_center): exactly zero on constants.

    Equals spatially_variant_conv up to x * sum(w) (which is 0 to rounding);
    the difference form makes constant inputs map to exact zero at every
    position including borders.  Single-group fields only; returns (N, C, H, W).
    """
    if field.kind != "highpass":
        raise ValueError(f"highpass_filter needs a highpass field, got {field.kind}")
    if field.groups != 1:
        raise ValueError(f"highpass_filter expects one group, got {field.groups}")
    n, c, h, w = feature.shape
    k = field.ksize
    nb = neighbors(feature, k)
    center = nb[:, :, (k * k) // 2]
    out = None
    for q in range(k * k):
        term = field.weights[:, :, q].reshape(n, 1, h, w) * (nb[:, :, q] - center)
        out = term if out is None else out + term
    return out


def _regroup_subpixel(grouped: Tensor) -> Tensor:
    """(N, G, C, H, W) with G=r*r -> (N, C*G, H, W) ordered so that group g of
    channel c lands at sub-pixel (g // r, g % r) after pixel_shuffle."""
    n, g, c, h, w = grouped.shape
    return grouped.transpose(0, 2, 1, 3, 4).reshape(n, c * g, h, w)


def lp_filter_upsample(guide: Tensor, high: Tensor, proj: Conv2d, head: Conv2d,
                       groups: int = 4) -> Tensor:
    """Smooth 2x upsampling of `high` with kernels predicted from `guide`.

    guide is (N, C, H, W), high (N, C', H/2, W/2).  The 1x1 projection first
    harmonizes C' to C, a stride-2 head predicts G*K² kernel logits at the low
    resolution, and the G=4 filtered groups are rearranged to 2x resolution by
    pixel shuffle.
    """
    n, c, h, w = guide.shape
    nh, ch, hh, wh = high.shape
    if h != 2 * hh or w != 2 * wh:
        raise ValueError(f"guide {h}x{w} must be exactly 2x the coarse input {hh}x{wh}")
    r = int(round(groups ** 0.5))
    if r * r != groups or r != 2:
        raise ValueError(f"sub-pixel group count must be 4 for 2x upsampling, got {groups}")
    y = proj(high)
    field = predict_lowpass_kernels(guide, head.weight, head.bias, groups, stride=2)
    filtered = spatially_variant_conv(y, field)
    return pixel_shuffle(_regroup_subpixel(filtered), r)


def lp_filter_same(guide: Tensor, high: Tensor, proj: Conv2d, head: Conv2d) -> Tensor:
    """Same-resolution variant of the low-pass path (stem head): one group,
    stride-1 prediction, no sub-pixel rearrangement."""
    n, c, h, w = guide.shape
    if high.shape[2] != h or high.shape[3] != w:
        raise ValueError(f"guide {h}x{w} and coarse input {high.shape[2:]} must match")
    y = proj(high)
    field = predict_lowpass_kernels(guide, head.weight, head.bias, groups=1, stride=1)
    return spatially_variant_conv(y, field).reshape(y.shape)


def local_similarity(z: Tensor) -> Tensor:
    """Cosine similarity of each pixel to its 8 neighbors: (N, C, H, W) -> (N, 8, H, W).

    Norms carry an epsilon (1e-8) so zero vectors stay finite; replicate
    padding at borders.
    """
    n, c, h, w = z.shape
    nb = neighbors(z, 3)  # (N, C, 9, H, W)
    ring = concat([nb[:, :, :4], nb[:, :, 5:]], axis=2)  # drop the center tap
    zc = z.reshape(n, c, 1, h, w)
    dots = (ring * zc).sum(axis=1)
    eps_sq = 1e-16  # sqrt gives the 1e-8 floor on each norm
    nz = sqrt((zc * zc).sum(axis=1) + eps_sq)
    nn = sqrt((ring * ring).sum(axis=1) + eps_sq)
    return dots / (nz * nn)


def offset_generator(z: Tensor, d_head: Conv2d, a_head: Conv2d) -> OffsetField:
    """Direction times gated magnitude: D = conv([Z, S]), A = sigmoid(conv([Z, S])),
    O = D * A with A broadcast over the two offset channels."""
    s = local_similarity(z)
    zs = concat([z, s], axis=1)
    d = d_head(zs)
    a = sigmoid(a_head(zs))
    return OffsetField(d * a)


class SaffBlock(Module):
    """Two-stage fusion of a fine skip feature X with a coarse decoder feature Y.

    Stage 1 forms Z = LP-upsampled Y + (highpass(X) + X); stage 2 re-predicts
    both filters from Z, generates offsets from Z, resamples the smooth branch
    and adds the detail branch.  ratio=2 for pyramid levels, ratio=1 for the
    stem head where Y is already at the target resolution.
    """

    def __init__(self, c_x: int, c_y: int, rng: np.random.Generator, ratio: int = 2,
                 k: int = 3, groups: int = 4):
        if ratio not in (1, 2):
            raise ValueError(f"fusion ratio must be 1 or 2, got {ratio}")
        if ratio == 2 and groups != 4:
            raise ValueError(f"2x fusion needs 4 sub-pixel groups, got {groups}")
        self.ratio = ratio
        self.k = k
        self.groups = groups if ratio == 2 else 1
        kk = k * k
        self.proj = Conv2d(c_y, c_x, 1, rng)
        self.lp1 = Conv2d(c_x, self.groups * kk, 3, rng, stride=ratio)
        self.hp1 = Conv2d(c_x, kk, 3, rng)
        self.lp2 = Conv2d(c_x, self.groups * kk, 3, rng, stride=ratio)
        self.hp2 = Conv2d(c_x, kk, 3, rng)
        self.off_d = Conv2d(c_x + kk - 1, 2, 3, rng)
        self.off_a = Conv2d(c_x + kk - 1, 1, 3, rng)
        # Prediction heads start at zero: uniform box kernels, identity-minus-box
        # highpass, and zero offsets.  Content dependence is learned, so stacked
        # fusion levels stay well conditioned before any normalization kicks in.
        for head in (self.lp1, self.hp1, self.lp2, self.hp2, self.off_d):
            head.weight.data[...] = 0.0
            head.bias.data[...] = 0.0

    def _lp_path(self, guide: Tensor, y: Tensor, head: Conv2d) -> Tensor:
        if self.ratio == 2:
            return lp_filter_upsample(guide, y, self.proj, head, self.groups)
        return lp_filter_same(guide, y, self.proj, head)

    def __call__(self, x: Tensor, y: Tensor) -> Tensor:
        return saff_fuse(x, y, self)


def saff_fuse(x: Tensor, y: Tensor, params: SaffBlock) -> Tensor:
    """Full two-stage fusion; output matches the fine input's geometry."""
    n, c, h, w = x.shape
    if x.shape[2] != params.ratio * y.shape[2] or x.shape[3] != params.ratio * y.shape[3]:
        raise ValueError(
            f"resolution ratio must be {params.ratio}:1, got {x.shape[2:]} vs {y.shape[2:]}"
        )
    y_smooth = params._lp_path(x, y, params.lp1)
    x_detail = highpass_filter(x, predict_highpass_kernels(x, params.hp1.weight, params.hp1.bias,
                                                           params.k)) + x
    z = y_smooth + x_detail
    x_hat = highpass_filter(x, predict_highpass_kernels(z, params.hp2.weight, params.hp2.bias,
                                                        params.k)) + x
    y_hat = params._lp_path(z, y, params.lp2)
    off = offset_generator(z, params.off_d, params.off_a).offsets
    base_r = np.broadcast_to(np.arange(h, dtype=x.data.dtype)[None, :, None], (n, h, w))
    base_c = np.broadcast_to(np.arange(w, dtype=x.data.dtype)[None, None, :], (n, h, w))
    rows = off[:, 0] + Tensor(np.ascontiguousarray(base_r))
    cols = off[:, 1] + Tensor(np.ascontiguousarray(base_c))
    return bilinear_sample(y_hat, rows, cols) + x_hat
