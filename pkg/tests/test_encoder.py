"""Encoder: patch embedding, relative position bias, pooled attention, pyramid."""

import numpy as np
import pytest

from saipnet.encoder import (ConvEncoder, Encoder, EncoderConfig, PooledAttentionBlock,
                             patch_embed, relpos_bias)
from saipnet.gradaudit import audit_module
from saipnet.tensor import Tensor, precision


@pytest.fixture(autouse=True)
def _f64():
    with precision(64):
        yield


def _loop_patch_embed(img, w, b):
    n, cin, h, wd = img.shape
    c, _, p, _ = w.shape
    out = np.zeros((n, c, h // p, wd // p))
    for bi in range(n):
        for co in range(c):
            for i in range(h // p):
                for j in range(wd // p):
                    patch = img[bi, :, i * p:(i + 1) * p, j * p:(j + 1) * p]
                    out[bi, co, i, j] = (patch * w[co]).sum() + b[co]
    return out


def test_patch_embed_matches_loop():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(5, 3, 4, 4))
    b = rng.normal(size=5)
    got = patch_embed(Tensor(img), Tensor(w), Tensor(b)).data
    assert got.shape == (2, 5, 2, 2)
    np.testing.assert_allclose(got, _loop_patch_embed(img, w, b), rtol=1e-12)


def test_patch_embed_shape_zero_and_selection():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(2, 3, 64, 64))
    w = rng.normal(size=(32, 3, 4, 4))
    assert patch_embed(Tensor(img), Tensor(w)).shape == (2, 32, 16, 16)

    zero = patch_embed(Tensor(np.zeros((1, 3, 8, 8))), Tensor(w), Tensor(np.zeros(32)))
    np.testing.assert_array_equal(zero.data, 0)

    # kernel that picks pixel (0, 0) of channel 1 in each patch
    sel = np.zeros((1, 3, 4, 4))
    sel[0, 1, 0, 0] = 1.0
    out = patch_embed(Tensor(img), Tensor(sel)).data
    np.testing.assert_array_equal(out[:, 0], img[:, 1, ::4, ::4])


def test_patch_embed_rejections():
    img = Tensor(np.zeros((1, 3, 9, 8)))
    with pytest.raises(ValueError, match="not divisible"):
        patch_embed(img, Tensor(np.zeros((4, 3, 4, 4))))
    with pytest.raises(ValueError, match="does not match input channels"):
        patch_embed(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 2, 4, 4))))


def test_relpos_bias_zero_tables_and_single_token():
    rng = np.random.default_rng(2)
    q = Tensor(rng.normal(size=(1, 4, 3)))
    zeros = Tensor(np.zeros((3, 3)))
    out = relpos_bias(q, zeros, zeros, (2, 2), (2, 2)).data
    np.testing.assert_array_equal(out, np.zeros((1, 4, 4)))

    q1 = Tensor(rng.normal(size=(1, 1, 3)))
    one = relpos_bias(q1, Tensor(rng.normal(size=(1, 3))),
                      Tensor(rng.normal(size=(1, 3))), (1, 1), (1, 1))
    assert one.shape == (1, 1, 1)


def test_relpos_bias_hand_case():
    """2x2 grid, d=1, unit queries: E[i,j] = rh[ri-rj] + rw[ci-cj]."""
    rh = np.array([[10.0], [20.0], [30.0]])   # displacements -1, 0, +1
    rw = np.array([[1.0], [2.0], [3.0]])
    q = Tensor(np.ones((1, 4, 1)))
    out = relpos_bias(q, Tensor(rh), Tensor(rw), (2, 2), (2, 2)).data[0]
    pos = [(0, 0), (0, 1), (1, 0), (1, 1)]
    want = np.empty((4, 4))
    for i, (ri, ci) in enumerate(pos):
        for j, (rj, cj) in enumerate(pos):
            want[i, j] = rh[ri - rj + 1, 0] + rw[ci - cj + 1, 0]
    np.testing.assert_allclose(out, want, rtol=1e-12)


def test_relpos_bias_table_too_small():
    q = Tensor(np.ones((1, 16, 2)))
    small = Tensor(np.zeros((3, 2)))
    with pytest.raises(ValueError, match="outside table"):
        relpos_bias(q, small, small, (4, 4), (4, 4))


def test_attention_block_uniform_when_keys_collapse():
    """Zero key projection makes every key identical, so attention averages V."""
    rng = np.random.default_rng(3)
    blk = PooledAttentionBlock(8, 8, heads=2, grid_in=(4, 4), rng=rng, kv_stride=2)
    blk.wk.weight.data[...] = 0.0
    blk.wk.bias.data[...] = 0.0
    blk.rel_h.data[...] = 0.0
    blk.rel_w.data[...] = 0.0
    tokens = Tensor(rng.normal(size=(2, 16, 8)))
    got, grid = blk(tokens, (4, 4))
    assert grid == (4, 4)

    xn = blk.ln1(tokens)
    q, _ = blk.pool_q(blk.wq(xn), (4, 4))
    v, _ = blk.pool_v(blk.wv(xn), (4, 4))
    qh = blk._split(q)
    vh = blk._split(v)
    out = vh.mean(axis=2, keepdims=True) + qh
    merged = out.transpose(0, 2, 1, 3).reshape(2, 16, 8)
    y = blk.wo(merged)
    from saipnet.tensor import gelu
    want = y + blk.mlp_out(gelu(blk.mlp_in(blk.ln2(y))))
    np.testing.assert_allclose(got.data, want.data, rtol=1e-10, atol=1e-12)


def test_attention_block_relpos_flag_consistency():
    """Zeroed tables and a disabled bias path give identical outputs."""
    rng = np.random.default_rng(4)
    blk = PooledAttentionBlock(8, 16, heads=2, grid_in=(4, 4), rng=rng,
                               q_stride=2, kv_stride=2)
    blk.rel_h.data[...] = 0.0
    blk.rel_w.data[...] = 0.0
    tokens = Tensor(rng.normal(size=(1, 16, 8)))
    with_bias, grid = blk(tokens, (4, 4))
    blk.use_relpos = False
    without, grid2 = blk(tokens, (4, 4))
    assert grid == grid2 == (2, 2)
    np.testing.assert_array_equal(with_bias.data, without.data)


def test_attention_block_rejections():
    rng = np.random.default_rng(5)
    with pytest.raises(ValueError, match="must divide"):
        PooledAttentionBlock(9, 8, heads=2, grid_in=(2, 2), rng=rng)
    blk = PooledAttentionBlock(8, 8, heads=2, grid_in=(2, 2), rng=rng)
    with pytest.raises(ValueError, match="does not match grid"):
        blk(Tensor(np.zeros((1, 5, 8))), (2, 2))


def test_attention_block_gradcheck():
    err, name = audit_module("encoder", seeds=3, bits=64)
    assert err < 1e-5, name


@pytest.mark.parametrize("size", [32, 64, 96])
def test_encoder_pyramid_geometry(size):
    rng = np.random.default_rng(6)
    cfg = EncoderConfig(base_channels=16)
    enc = Encoder(cfg, rng, image_size=size)
    pyr = enc(Tensor(rng.normal(size=(1, 3, size, size))))
    assert [t.shape for t in pyr] == [
        (1, 16 << s, size >> (2 + s), size >> (2 + s)) for s in range(4)
    ]


def test_encoder_determinism_and_rejection():
    rng = np.random.default_rng(7)
    cfg = EncoderConfig(base_channels=16)
    enc = Encoder(cfg, rng, image_size=32)
    img = np.random.default_rng(8).normal(size=(1, 3, 32, 32))
    a = enc(Tensor(img.copy()))
    b = enc(Tensor(img.copy()))
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.data, tb.data)
    with pytest.raises(ValueError, match="divisible by 32"):
        enc(Tensor(np.zeros((1, 3, 48, 48))))
    with pytest.raises(ValueError, match="divisible by 32"):
        Encoder(cfg, rng, image_size=40)


def test_conv_encoder_pyramid_geometry():
    rng = np.random.default_rng(9)
    cfg = EncoderConfig(base_channels=16)
    enc = ConvEncoder(cfg, rng)
    pyr = enc(Tensor(rng.normal(size=(2, 3, 64, 64))))
    assert [t.shape for t in pyr] == [
        (2, 16 << s, 64 >> (2 + s), 64 >> (2 + s)) for s in range(4)
    ]
    with pytest.raises(ValueError, match="divisible by 32"):
        enc(Tensor(np.zeros((1, 3, 40, 64))))


def test_relpos_table_sizes_linear_in_grid():
    rng = np.random.default_rng(10)
    cfg = EncoderConfig(base_channels=16)
    enc = Encoder(cfg, rng, image_size=64)
    first = enc.blocks[0]
    # 16x16 token grid: 31 displacement rows per axis, one d_head-wide row each
    assert first.rel_h.shape == (31, first.d_head)
    assert first.rel_w.shape == (31, first.d_head)
