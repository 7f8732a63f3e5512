"""Spatial array operations on the autograd tensor type.

Convolution uses an im2col view plus one GEMM; its adjoint scatters with
bincount over precomputed flat indices, so forward and backward are both
single C-level passes.  All spatial ops keep the NCHW layout and the "same"
padding contract: for odd k, pad = dilation*(k-1)//2 on every side and the
output grid is ceil(H/stride) x ceil(W/stride).
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Module, Tensor, _as_tensor, _fold_pad, _node, parameter, buffer, power

# flat scatter indices keyed by the conv geometry; shared by conv2d and neighbors
_IDX_CACHE: dict = {}


def _same_pad(k: int, dilation: int) -> int:
    return dilation * (k - 1) // 2


def _out_size(size: int, pad: int, k: int, stride: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _pad_raw(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, width, mode="constant" if mode == "zero" else "edge")


def _unpad_grad(g: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return g
    if mode == "replicate":
        return _fold_pad(g, pad)
    return g[..., pad:-pad, pad:-pad]


def _patch_view(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def _scatter_index(cin: int, hp: int, wp: int, k: int, stride: int, dilation: int,
                   ho: int, wo: int) -> np.ndarray:
    """Flat indices into a (cin, hp, wp) grid, laid out (L, cin*k*k)."""
    key = (cin, hp, wp, k, stride, dilation, ho, wo)
    idx = _IDX_CACHE.get(key)
    if idx is None:
        rows = np.arange(k)[:, None] * dilation + np.arange(ho)[None, :] * stride  # (k, ho)
        cols = np.arange(k)[:, None] * dilation + np.arange(wo)[None, :] * stride  # (k, wo)
        # (cin, k, k, ho, wo) flat positions
        full = (
            np.arange(cin)[:, None, None, None, None] * (hp * wp)
            + rows[None, :, None, :, None] * wp
            + cols[None, None, :, None, :]
        )
        idx = np.ascontiguousarray(full.transpose(3, 4, 0, 1, 2).reshape(ho * wo, cin * k * k))
        _IDX_CACHE[key] = idx
    return idx


def _scatter_to_input(gcols: np.ndarray, idx: np.ndarray, n: int, cin: int, hp: int, wp: int,
                      pad: int, mode: str, dtype) -> np.ndarray:
    flat_idx = idx.ravel()
    gxp = np.empty((n, cin, hp, wp), dtype=np.float64)
    for b in range(n):
        gxp[b] = np.bincount(flat_idx, weights=gcols[b].ravel(),
                             minlength=cin * hp * wp).reshape(cin, hp, wp)
    return _unpad_grad(gxp, pad, mode).astype(dtype)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           dilation: int = 1, groups: int = 1, padding_mode: str = "zero") -> Tensor:
    """2d convolution with same padding.

    x is (N, Cin, H, W), weight (Cout, Cin/groups, k, k) with k odd; output is
    (N, Cout, ceil(H/stride), ceil(W/stride)).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    if padding_mode not in ("zero", "replicate"):
        raise ValueError(f"unknown padding mode {padding_mode!r}")
    if cin != cg * groups or cout % groups != 0:
        raise ValueError(
            f"channel mismatch: input {cin}, weight expects {cg}*{groups} in, {cout} out"
        )
    if groups == 1:
        out = _conv_dense(x, weight, stride, dilation, padding_mode)
    elif groups == cin and cout == cin:
        out = _conv_depthwise(x, weight, stride, dilation, padding_mode)
    else:
        from .tensor import concat
        per_out = cout // groups
        parts = [
            _conv_dense(x[:, g * cg:(g + 1) * cg], weight[g * per_out:(g + 1) * per_out],
                        stride, dilation, padding_mode)
            for g in range(groups)
        ]
        out = concat(parts, axis=1)
    if bias is not None:
        if bias.shape != (cout,):
            raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
        out = out + bias.reshape(1, cout, 1, 1)
    return out


def _conv_dense(x: Tensor, weight: Tensor, stride: int, dilation: int, mode: str) -> Tensor:
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    pad = _same_pad(k, dilation)
    xp = _pad_raw(x.data, pad, mode)
    hp, wp = xp.shape[-2:]
    ho, wo = _out_size(h, pad, k, stride, dilation), _out_size(w, pad, k, stride, dilation)
    patches = _patch_view(xp, k, stride, dilation, ho, wo)
    ckk = cin * k * k
    cols = np.ascontiguousarray(patches.transpose(0, 4, 5, 1, 2, 3)).reshape(n, ho * wo, ckk)
    w2 = weight.data.reshape(cout, ckk)
    out = (cols @ w2.T).transpose(0, 2, 1).reshape(n, cout, ho, wo)

    def vjp(g):
        g2 = np.ascontiguousarray(g.reshape(n, cout, ho * wo).transpose(0, 2, 1))
        gw = np.tensordot(g2, cols, axes=([0, 1], [0, 1])).reshape(weight.shape)
        gcols = g2 @ w2
        idx = _scatter_index(cin, hp, wp, k, stride, dilation, ho, wo)
        gx = _scatter_to_input(gcols, idx, n, cin, hp, wp, pad, mode, x.data.dtype)
        return gx, gw.astype(weight.data.dtype)

    return _node(np.ascontiguousarray(out), (x, weight), vjp)


def _conv_depthwise(x: Tensor, weight: Tensor, stride: int, dilation: int, mode: str) -> Tensor:
    n, c, h, w = x.shape
    _, _, k, _ = weight.shape
    pad = _same_pad(k, dilation)
    xp = _pad_raw(x.data, pad, mode)
    hp, wp = xp.shape[-2:]
    ho, wo = _out_size(h, pad, k, stride, dilation), _out_size(w, pad, k, stride, dilation)
    patches = _patch_view(xp, k, stride, dilation, ho, wo)
    wd = weight.data.reshape(c, k, k)
    out = np.einsum("ncijhw,cij->nchw", patches, wd, optimize=True)

    def vjp(g):
        gw = np.einsum("nchw,ncijhw->cij", g, patches, optimize=True).reshape(weight.shape)
        gcols = np.einsum("nchw,cij->nhwcij", g, wd, optimize=True).reshape(n, ho * wo, c * k * k)
        idx = _scatter_index(c, hp, wp, k, stride, dilation, ho, wo)
        gx = _scatter_to_input(gcols, idx, n, c, hp, wp, pad, mode, x.data.dtype)
        return gx, gw.astype(weight.data.dtype)

    return _node(np.ascontiguousarray(out), (x, weight), vjp)


def neighbors(x: Tensor, k: int, padding_mode: str = "replicate") -> Tensor:
    """Stack the k*k shifted copies of x: (N, C, H, W) -> (N, C, k*k, H, W).

    Index q = i*k + j holds the neighbor at offset (i - k//2, j - k//2), so the
    center tap sits at q = (k*k) // 2.
    """
    if k % 2 == 0:
        raise ValueError(f"neighbor window must be odd, got {k}")
    n, c, h, w = x.shape
    pad = k // 2
    xp = _pad_raw(x.data, pad, padding_mode)
    hp, wp = xp.shape[-2:]
    patches = _patch_view(xp, k, 1, 1, h, w)
    out = np.ascontiguousarray(patches).reshape(n, c, k * k, h, w)

    def vjp(g):
        gcols = np.ascontiguousarray(
            g.reshape(n, c, k * k, h * w).transpose(0, 3, 1, 2)
        ).reshape(n, h * w, c * k * k)
        idx = _scatter_index(c, hp, wp, k, 1, 1, h, w)
        return (_scatter_to_input(gcols, idx, n, c, hp, wp, pad, padding_mode, x.data.dtype),)

    return _node(out, (x,), vjp)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r*r, H, W) to (N, C, H*r, W*r); channel c*r*r + i*r + j
    lands at spatial offset (i, j) inside each r x r cell."""
    n, crr, h, w = x.shape
    if crr % (r * r) != 0:
        raise ValueError(f"channels {crr} not divisible by r*r = {r * r}")
    c = crr // (r * r)
    return (
        x.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)
    )


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of pixel_shuffle: (N, C, H*r, W*r) -> (N, C*r*r, H, W)."""
    n, c, hr, wr = x.shape
    if hr % r != 0 or wr % r != 0:
        raise ValueError(f"spatial size {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    return (
        x.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)
    )


def bilinear_sample(x: Tensor, rows, cols) -> Tensor:
    """Sample x at absolute fractional coordinates with bilinear weights.

    rows/cols are (N, Ho, Wo) in pixel units.  Coordinates are clamped to the
    image; where clamping fires, the gradient to the coordinate is zero.
    """
    rows_t = _as_tensor(rows, x)
    cols_t = _as_tensor(cols, x)
    if x.ndim == 3:  # single image: lift to a batch of one
        out = bilinear_sample(x.reshape(1, *x.shape),
                              rows_t.reshape(1, *rows_t.shape),
                              cols_t.reshape(1, *cols_t.shape))
        return out.reshape(out.shape[1:])
    n, c, h, w = x.shape
    rr, cc = rows_t.data, cols_t.data
    if rr.shape != cc.shape or rr.shape[0] != n or rr.ndim != 3:
        raise ValueError(f"coordinate shapes {rr.shape} and {cc.shape} must be (N, Ho, Wo)")
    ho, wo = rr.shape[1:]
    L = ho * wo

    r = np.clip(rr, 0, h - 1)
    s = np.clip(cc, 0, w - 1)
    r0 = np.clip(np.floor(r), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(s), 0, max(w - 2, 0))
    wr = (r - r0).reshape(n, 1, L)
    wc = (s - c0).reshape(n, 1, L)
    r0i = r0.astype(np.int64).reshape(n, L)
    c0i = c0.astype(np.int64).reshape(n, L)

    xf = x.data.reshape(n, c, h * w)
    dc = 1 if w > 1 else 0  # degenerate axes collapse to a single tap
    dr = w if h > 1 else 0
    i00 = r0i * w + c0i
    i01 = i00 + dc
    i10 = i00 + dr
    i11 = i10 + dc
    v00 = np.take_along_axis(xf, i00[:, None, :], axis=2)
    v01 = np.take_along_axis(xf, i01[:, None, :], axis=2)
    v10 = np.take_along_axis(xf, i10[:, None, :], axis=2)
    v11 = np.take_along_axis(xf, i11[:, None, :], axis=2)
    w00 = (1 - wr) * (1 - wc)
    w01 = (1 - wr) * wc
    w10 = wr * (1 - wc)
    w11 = wr * wc
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).reshape(n, c, ho, wo)

    open_r = ((rr >= 0) & (rr <= h - 1)).reshape(n, 1, L)
    open_c = ((cc >= 0) & (cc <= w - 1)).reshape(n, 1, L)

    def vjp(g):
        gl = g.reshape(n, c, L)
        gx = None
        if x._needs_grad:
            chan = (np.arange(c, dtype=np.int64) * (h * w))[None, :, None]
            idx_all = np.concatenate(
                [i00[:, None, :] + chan, i01[:, None, :] + chan,
                 i10[:, None, :] + chan, i11[:, None, :] + chan], axis=2
            ).reshape(n, -1)
            w_all = np.concatenate([gl * w00, gl * w01, gl * w10, gl * w11], axis=2).reshape(n, -1)
            gx = np.empty((n, c, h, w), dtype=np.float64)
            for b in range(n):
                gx[b] = np.bincount(idx_all[b], weights=w_all[b],
                                    minlength=c * h * w).reshape(c, h, w)
            gx = gx.astype(x.data.dtype)
        gr = gc = None
        if rows_t._needs_grad:
            dvr = (1 - wc) * (v10 - v00) + wc * (v11 - v01)
            gr = ((gl * dvr).sum(axis=1, keepdims=True) * open_r).reshape(n, ho, wo)
            gr = gr.astype(rows_t.data.dtype)
        if cols_t._needs_grad:
            dvc = (1 - wr) * (v01 - v00) + wr * (v11 - v10)
            gc = ((gl * dvc).sum(axis=1, keepdims=True) * open_c).reshape(n, ho, wo)
            gc = gc.astype(cols_t.data.dtype)
        return gx, gr, gc

    return _node(out, (x, rows_t, cols_t), vjp)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize to (out_h, out_w) with bilinear weights, half-pixel alignment."""
    n, c, h, w = x.shape
    src_r = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    src_c = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    rows = np.broadcast_to(src_r[None, :, None], (n, out_h, out_w))
    cols = np.broadcast_to(src_c[None, None, :], (n, out_h, out_w))
    return bilinear_sample(x, rows.astype(x.data.dtype), cols.astype(x.data.dtype))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then rescale."""
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc * power(var + eps, -0.5) * gamma + beta


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = 1e-5

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(rng.normal(0.0, d_in ** -0.5, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 dilation: int = 1, groups: int = 1, bias: bool = True,
                 padding_mode: str = "zero"):
        fan_in = (cin // groups) * k * k
        self.weight = parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), (cout, cin // groups, k, k)))
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.padding_mode = padding_mode

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.groups,
                      self.padding_mode)


class BatchNorm2d(Module):
    """Per-channel batch norm over (N, H, W) with running statistics."""

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(c))
        self.beta = parameter(np.zeros(c))
        self.running_mean = buffer(np.zeros(c))
        self.running_var = buffer(np.ones(c))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        c = x.shape[1]
        if training:
            if x.shape[0] < 2:
                raise ValueError("batch norm in training mode needs batch size >= 2")
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
            n = x.size // c
            unbiased = var.data.reshape(c) * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean = buffer((1 - m) * self.running_mean.data + m * mu.data.reshape(c))
            self.running_var = buffer((1 - m) * self.running_var.data + m * unbiased)
            xn = xc * power(var + self.eps, -0.5)
        else:
            mu = self.running_mean.data.reshape(1, c, 1, 1)
            inv = 1.0 / np.sqrt(self.running_var.data.reshape(1, c, 1, 1) + self.eps)
            xn = (x - mu) * inv
        return xn * self.gamma.reshape(1, c, 1, 1) + self.beta.reshape(1, c, 1, 1)
