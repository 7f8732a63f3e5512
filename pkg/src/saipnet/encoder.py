"""Hierarchical four-stage encoder with pooling attention.

Tokens live on a 2d grid.  Each block projects queries/keys/values, pools
them with depthwise strided convolutions over the grid, adds a decomposed
relative position bias, and keeps a residual on the query branch so spatial
downsampling and channel widening can happen inside the block itself.
The four stage outputs form the feature pyramid at 1/4 .. 1/32 resolution
with channel widths C, 2C, 4C, 8C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Module, Tensor, gelu, parameter, softmax, take
from .ops import Conv2d, LayerNorm, Linear


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    base_channels: int = 32
    blocks_per_stage: tuple = (1, 1, 2, 1)
    heads_per_stage: tuple = (1, 2, 4, 8)
    kv_strides: tuple = (2, 2, 1, 1)

    def stage_channels(self, s: int) -> int:
        return self.base_channels * (1 << s)


def patch_embed(image: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Non-overlapping patch projection: (N, 3, H, W) -> (N, C, H/p, W/p).

    weight is (C, 3, p, p); the op equals a stride-p convolution with kernel p.
    """
    n, cin, h, w = image.shape
    c, cin2, p, p2 = weight.shape
    if cin2 != cin or p != p2:
        raise ValueError(f"patch weight {weight.shape} does not match input channels {cin}")
    if h % p != 0 or w % p != 0:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
    hp, wp = h // p, w // p
    patches = (
        image.reshape(n, cin, hp, p, wp, p)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(n, hp * wp, cin * p * p)
    )
    tokens = patches @ weight.reshape(c, cin * p * p).transpose(1, 0)
    if bias is not None:
        tokens = tokens + bias
    return tokens.reshape(n, hp, wp, c).transpose(0, 3, 1, 2)


def _displacements(q_len: int, q_stride: int, k_len: int, k_stride: int, table_rows: int) -> np.ndarray:
    center = (table_rows - 1) // 2
    disp = (np.arange(q_len) * q_stride)[:, None] - (np.arange(k_len) * k_stride)[None, :]
    idx = disp + center
    if idx.min() < 0 or idx.max() >= table_rows:
        raise ValueError(
            f"relative displacement {disp.min()}..{disp.max()} outside table of {table_rows} rows"
        )
    return idx


def relpos_bias(q: Tensor, rh: Tensor, rw: Tensor, q_grid: tuple, k_grid: tuple,
                q_stride: int = 1, k_stride: int = 1) -> Tensor:
    """Decomposed relative position bias.

    q is (..., L_q, d) on grid q_grid; rh/rw are (rows, d) tables indexed by
    row/column displacement measured in input-grid units (token index times
    pooling stride).  Returns (..., L_q, L_k) with
    E[i, j] = q_i . (rh[dr(i,j)] + rw[dc(i,j)]).
    """
    hq, wq = q_grid
    hk, wk = k_grid
    lead = q.shape[:-2]
    d = q.shape[-1]
    idx_h = _displacements(hq, q_stride, hk, k_stride, rh.shape[0])
    idx_w = _displacements(wq, q_stride, wk, k_stride, rw.shape[0])
    rh_sel = take(rh, idx_h.reshape(-1)).reshape(1, hq, 1, hk, 1, d)
    rw_sel = take(rw, idx_w.reshape(-1)).reshape(1, 1, wq, 1, wk, d)
    q6 = q.reshape(-1, hq, wq, 1, 1, d)
    eh = (q6 * rh_sel).sum(-1).reshape(-1, hq, wq, hk, 1)
    ew = (q6 * rw_sel).sum(-1).reshape(-1, hq, wq, 1, wk)
    return (eh + ew).reshape(*lead, hq * wq, hk * wk)


class _TokenPool(Module):
    """Depthwise 3x3 strided convolution over the token grid, then LayerNorm."""

    def __init__(self, dim: int, stride: int, rng: np.random.Generator):
        self.conv = Conv2d(dim, dim, 3, rng, stride=stride, groups=dim, bias=False)
        self.norm = LayerNorm(dim)
        self.stride = stride

    def __call__(self, tokens: Tensor, grid: tuple) -> tuple:
        n, l, d = tokens.shape
        h, w = grid
        img = tokens.reshape(n, h, w, d).transpose(0, 3, 1, 2)
        pooled = self.conv(img)
        ho, wo = pooled.shape[2], pooled.shape[3]
        out = pooled.transpose(0, 2, 3, 1).reshape(n, ho * wo, d)
        return self.norm(out), (ho, wo)


class PooledAttentionBlock(Module):
    """Pre-norm attention block with pooled Q/K/V and a query-branch residual.

    The output projection maps d_in to d_out, so the stage-transition blocks
    double the channel width here while the query pooling halves the grid.
    """

    def __init__(self, d_in: int, d_out: int, heads: int, grid_in: tuple,
                 rng: np.random.Generator, q_stride: int = 1, kv_stride: int = 1):
        if d_in % heads != 0:
            raise ValueError(f"heads {heads} must divide model width {d_in}")
        self.heads = heads
        self.d_head = d_in // heads
        self.q_stride = q_stride
        self.kv_stride = kv_stride
        self.use_relpos = True
        self.ln1 = LayerNorm(d_in)
        self.wq = Linear(d_in, d_in, rng)
        self.wk = Linear(d_in, d_in, rng)
        self.wv = Linear(d_in, d_in, rng)
        self.pool_q = _TokenPool(d_in, q_stride, rng)
        self.pool_k = _TokenPool(d_in, kv_stride, rng)
        self.pool_v = _TokenPool(d_in, kv_stride, rng)
        hin, win = grid_in
        scale = self.d_head ** -0.5
        self.rel_h = parameter(rng.normal(0.0, scale, (2 * hin - 1, self.d_head)))
        self.rel_w = parameter(rng.normal(0.0, scale, (2 * win - 1, self.d_head)))
        self.wo = Linear(d_in, d_out, rng)
        self.ln2 = LayerNorm(d_out)
        self.mlp_in = Linear(d_out, 4 * d_out, rng)
        self.mlp_out = Linear(4 * d_out, d_out, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, l, d = x.shape
        return x.reshape(n, l, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def __call__(self, tokens: Tensor, grid: tuple) -> tuple:
        n, l, d = tokens.shape
        if l != grid[0] * grid[1]:
            raise ValueError(f"token count {l} does not match grid {grid}")
        xn = self.ln1(tokens)
        q, q_grid = self.pool_q(self.wq(xn), grid)
        k, k_grid = self.pool_k(self.wk(xn), grid)
        v, _ = self.pool_v(self.wv(xn), grid)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        logits = qh @ kh.transpose(0, 1, 3, 2)
        if self.use_relpos:
            logits = logits + relpos_bias(qh, self.rel_h, self.rel_w, q_grid, k_grid,
                                          self.q_stride, self.kv_stride)
        att = softmax(logits * (self.d_head ** -0.5), axis=-1)
        out = att @ vh + qh
        lq = q_grid[0] * q_grid[1]
        merged = out.transpose(0, 2, 1, 3).reshape(n, lq, d)
        y = self.wo(merged)
        y = y + self.mlp_out(gelu(self.mlp_in(self.ln2(y))))
        return y, q_grid


class ConvEncoder(Module):
    """Plain strided-convolution backbone emitting the same pyramid geometry;
    stands in for the attention encoder in ablation runs."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, in_channels: int = 3):
        from .ops import Conv2d
        c = config.base_channels
        self.intro = [Conv2d(in_channels, c, 3, rng, stride=2), Conv2d(c, c, 3, rng, stride=2)]
        self.stage_convs = [
            Conv2d(config.stage_channels(max(s - 1, 0)) if s else c,
                   config.stage_channels(s), 3, rng, stride=1 if s == 0 else 2)
            for s in range(4)
        ]
        self.refine = [Conv2d(config.stage_channels(s), config.stage_channels(s), 3, rng)
                       for s in range(4)]

    def __call__(self, image: Tensor) -> list:
        h, w = image.shape[2], image.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"input {h}x{w} must be divisible by 32")
        x = image
        for conv in self.intro:
            x = gelu(conv(x))
        pyramid = []
        for s in range(4):
            x = gelu(self.stage_convs[s](x))
            x = x + gelu(self.refine[s](x))
            pyramid.append(x)
        return pyramid


class Encoder(Module):
    """Patch embedding plus four stages of pooling-attention blocks."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator,
                 image_size: int = 64, in_channels: int = 3):
        if image_size % 32 != 0:
            raise ValueError(f"image size {image_size} must be divisible by 32")
        self.config = config
        p, c = config.patch_size, config.base_channels
        fan_in = in_channels * p * p
        self.patch_weight = parameter(rng.normal(0.0, fan_in ** -0.5, (c, in_channels, p, p)))
        self.patch_bias = parameter(np.zeros(c))
        self.blocks = []
        grid = image_size // p
        d_in = c
        for s in range(4):
            d_stage = config.stage_channels(s)
            heads = config.heads_per_stage[s]
            kv = config.kv_strides[s]
            for b in range(config.blocks_per_stage[s]):
                first = b == 0 and s > 0
                blk = PooledAttentionBlock(
                    d_in, d_stage, heads, (grid, grid), rng,
                    q_stride=2 if first else 1, kv_stride=kv,
                )
                if first:
                    grid //= 2
                self.blocks.append(blk)
                d_in = d_stage
        self.stage_ends = np.cumsum(config.blocks_per_stage).tolist()

    def __call__(self, image: Tensor) -> list:
        n, _, h, w = image.shape
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"input {h}x{w} must be divisible by 32")
        x = patch_embed(image, self.patch_weight, self.patch_bias)
        grid = (x.shape[2], x.shape[3])
        tokens = x.reshape(n, x.shape[1], grid[0] * grid[1]).transpose(0, 2, 1)
        pyramid = []
        for i, blk in enumerate(self.blocks):
            tokens, grid = blk(tokens, grid)
            if (i + 1) in self.stage_ends:
                d = tokens.shape[2]
                pyramid.append(
                    tokens.reshape(n, grid[0], grid[1], d).transpose(0, 3, 1, 2)
                )
        return pyramid
