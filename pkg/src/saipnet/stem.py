"""Learnable high-pass filter stem.

Each Lhpf layer predicts one depthwise K x K smoothing kernel per channel
(softmax over taps, modulated by a Hamming window, re-normalized to sum 1)
and subtracts the smoothed signal from its input, leaving high-frequency
detail.  Two such layers, each followed by a pointwise plus strided
convolution, bring the image to the decoder-top geometry at H/4.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Module, Tensor, gelu, parameter, softmax
from .ops import Conv2d, neighbors


def hamming_window(k: int) -> np.ndarray:
    """Separable taper h(p)h(q) with h(n) = 0.54 - 0.46 cos(2 pi n / (K-1))."""
    if k < 3 or k % 2 == 0:
        raise ValueError(f"window size must be odd and >= 3, got {k}")
    n = np.arange(k)
    h = 0.54 - 0.46 * np.cos(2.0 * math.pi * n / (k - 1))
    return np.outer(h, h)


def modulated_kernels(w_l: Tensor, k: int = 3) -> Tensor:
    """Softmax over taps, Hamming modulation, re-normalization to tap sum 1.

    w_l is (C, 1, K²); the result keeps that shape and sums to 1 per channel
    for any parameter values.
    """
    if w_l.ndim != 3 or w_l.shape[1] != 1 or w_l.shape[2] != k * k:
        raise ValueError(f"kernel weights must be (C, 1, {k * k}), got {w_l.shape}")
    sm = softmax(w_l, axis=-1)
    win = Tensor(hamming_window(k).reshape(1, 1, k * k).astype(sm.data.dtype))
    m = sm * win
    return m / m.sum(axis=-1, keepdims=True)


def lhpf_layer(x: Tensor, w_l: Tensor, k: int = 3) -> Tensor:
    """High-pass residual X - depthwise(X, modulated kernel), replicate padding.

    Computed as sum_q w_q (x - x_q), which is the same thing for tap-sum-1
    kernels but exactly zero on constant inputs at every position.
    """
    n, c, h, w = x.shape
    kern = modulated_kernels(w_l, k)  # (C, 1, K²)
    nb = neighbors(x, k)
    out = None
    for q in range(k * k):
        term = kern[:, 0, q].reshape(1, c, 1, 1) * (x - nb[:, :, q])
        out = term if out is None else out + term
    return out


class LhpfLayer(Module):
    def __init__(self, c: int, rng: np.random.Generator, k: int = 3):
        self.w_l = parameter(rng.normal(0.0, 0.1, (c, 1, k * k)))
        self.k = k

    def kernels(self) -> Tensor:
        return modulated_kernels(self.w_l, self.k)

    def __call__(self, x: Tensor) -> Tensor:
        return lhpf_layer(x, self.w_l, self.k)


class LhpfStem(Module):
    """Two Lhpf layers, each followed by 1x1 -> strided 3x3 -> GELU, mapping
    (N, 3, H, W) to (N, c_stem, H/4, W/4)."""

    def __init__(self, c_stem: int, rng: np.random.Generator, in_channels: int = 3, k: int = 3):
        # Replicate padding keeps constant maps constant through the strided
        # convolutions, so the second Lhpf layer also annihilates flat images
        # at the borders.
        self.lhpf1 = LhpfLayer(in_channels, rng, k)
        self.point1 = Conv2d(in_channels, c_stem, 1, rng)
        self.down1 = Conv2d(c_stem, c_stem, 3, rng, stride=2, padding_mode="replicate")
        self.lhpf2 = LhpfLayer(c_stem, rng, k)
        self.point2 = Conv2d(c_stem, c_stem, 1, rng)
        self.down2 = Conv2d(c_stem, c_stem, 3, rng, stride=2, padding_mode="replicate")

    def __call__(self, image: Tensor) -> Tensor:
        n, c, h, w = image.shape
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError(f"stem input {h}x{w} must be divisible by 4")
        x = gelu(self.down1(self.point1(self.lhpf1(image))))
        return gelu(self.down2(self.point2(self.lhpf2(x))))
