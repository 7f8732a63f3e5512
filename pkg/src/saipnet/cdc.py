"""Composite dilated convolution layer.

A 1x1 mixer redistributes channels, the result is split equally into D
branches convolved with increasing dilation (receptive field d*(k-1)+1 per
branch), and the concatenated branches pass through a small merge stack of
1x1 and 3x3 convolutions with batch norm and ReLU.
"""

from __future__ import annotations

import numpy as np

from .tensor import Module, Tensor, concat, relu
from .ops import BatchNorm2d, Conv2d, bilinear_resize


class Cdc(Module):
    """Multi-dilation context block preserving channel count and resolution."""

    def __init__(self, c: int, rng: np.random.Generator, dilations: tuple = (1, 2, 3),
                 k: int = 3):
        d = len(dilations)
        if c % d != 0:
            raise ValueError(f"channels {c} not divisible by branch count D={d}")
        if list(dilations) != sorted(set(dilations)):
            raise ValueError(f"dilations must strictly increase, got {dilations}")
        self.dilations = tuple(dilations)
        self.k = k
        self.mixer = Conv2d(c, c, 1, rng)
        cb = c // d
        self.branch_convs = [Conv2d(cb, cb, k, rng, dilation=di) for di in dilations]
        self.merge1 = Conv2d(c, c, 1, rng)
        self.bn1 = BatchNorm2d(c)
        self.merge2 = Conv2d(c, c, 3, rng)
        self.bn2 = BatchNorm2d(c)

    def branches(self, y: Tensor) -> list:
        """Mixed input split into equal parts, one dilated conv per part."""
        x = self.mixer(y)
        d = len(self.dilations)
        cb = x.shape[1] // d
        return [conv(x[:, i * cb:(i + 1) * cb]) for i, conv in enumerate(self.branch_convs)]

    def __call__(self, y: Tensor, training: bool = False) -> Tensor:
        merged = concat(self.branches(y), axis=1)
        h = relu(self.bn1(self.merge1(merged), training))
        return relu(self.bn2(self.merge2(h), training))


class UpsampleBlock(Module):
    """Bilinear 2x upsampling followed by a 3x3 convolution."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = Conv2d(c_in, c_out, 3, rng)

    def __call__(self, y: Tensor) -> Tensor:
        n, c, h, w = y.shape
        return self.conv(bilinear_resize(y, 2 * h, 2 * w))
