"""Structured ops: convolution vs loop oracle, shuffling, sampling, norms."""

import numpy as np
import pytest

from saipnet.ops import (BatchNorm2d, Conv2d, LayerNorm, Linear, bilinear_resize,
                         bilinear_sample, conv2d, layer_norm, neighbors, pixel_shuffle,
                         pixel_unshuffle)
from saipnet.tensor import (Tensor, buffer, finite_diff_grad, gradients, max_rel_error,
                            parameter, precision)


@pytest.fixture(autouse=True)
def _f64():
    with precision(64):
        yield


def _naive_conv(x, w, stride=1, dilation=1, groups=1, mode="zero"):
    """Direct nested-loop convolution with same padding."""
    n, cin, h, wd = x.shape
    cout, cg, k, _ = w.shape
    pad = dilation * (k - 1) // 2
    if mode == "zero":
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    ho = (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    per_out = cout // groups
    for b in range(n):
        for co in range(cout):
            g = co // per_out
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for p in range(k):
                            for q in range(k):
                                acc += (w[co, ci, p, q]
                                        * xp[b, g * cg + ci,
                                             i * stride + p * dilation,
                                             j * stride + q * dilation])
                    out[b, co, i, j] = acc
    return out


@pytest.mark.parametrize("stride,dilation,groups,mode", [
    (1, 1, 1, "zero"),
    (2, 1, 1, "zero"),
    (1, 2, 1, "zero"),
    (1, 3, 1, "replicate"),
    (1, 1, 2, "zero"),
    (2, 2, 2, "replicate"),
    (1, 1, 4, "zero"),      # depthwise when cin == cout == 4
])
def test_conv2d_matches_loop_oracle(stride, dilation, groups, mode):
    rng = np.random.default_rng(10 * stride + dilation + groups)
    cin, cout, k = 4, 4, 3
    x = rng.normal(size=(2, cin, 7, 6))
    w = rng.normal(size=(cout, cin // groups, k, k))
    got = conv2d(Tensor(x), Tensor(w), stride=stride, dilation=dilation,
                 groups=groups, padding_mode=mode).data
    want = _naive_conv(x, w, stride, dilation, groups, mode)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_identity_kernel_and_bias():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = conv2d(Tensor(x), Tensor(w)).data
    np.testing.assert_array_equal(out, x)
    b = np.array([1.0, -2.0, 0.5])
    out_b = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out_b, x + b.reshape(1, 3, 1, 1), rtol=1e-15)


@pytest.mark.parametrize("k", [3, 5])
@pytest.mark.parametrize("d", [1, 2, 3])
def test_conv2d_impulse_support(k, d):
    """Nonzero response of an impulse spans exactly d*(k-1)+1 pixels per axis."""
    size = 31
    x = np.zeros((1, 1, size, size))
    x[0, 0, size // 2, size // 2] = 1.0
    w = np.ones((1, 1, k, k))
    out = conv2d(Tensor(x), Tensor(w), dilation=d).data[0, 0]
    rows = np.where(out.any(axis=1))[0]
    cols = np.where(out.any(axis=0))[0]
    support = d * (k - 1) + 1
    assert rows[-1] - rows[0] + 1 == support
    assert cols[-1] - cols[0] + 1 == support
    # k taps per axis, spaced d apart
    assert len(rows) == k and len(cols) == k
    assert np.all(np.diff(rows) == d) and np.all(np.diff(cols) == d)


def test_conv2d_rejections():
    x = Tensor(np.zeros((1, 4, 6, 6)))
    w_even = Tensor(np.zeros((2, 4, 2, 2)))
    with pytest.raises(ValueError, match="odd"):
        conv2d(x, w_even)
    with pytest.raises(ValueError, match="4d"):
        conv2d(Tensor(np.zeros((4, 6, 6))), Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ValueError, match="channel mismatch"):
        conv2d(x, Tensor(np.zeros((2, 3, 3, 3))))
    with pytest.raises(ValueError, match="channel mismatch"):
        conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), groups=2)  # cout not divisible
    with pytest.raises(ValueError, match="stride and dilation"):
        conv2d(x, Tensor(np.zeros((2, 4, 3, 3))), stride=0)
    with pytest.raises(ValueError, match="padding mode"):
        conv2d(x, Tensor(np.zeros((2, 4, 3, 3))), padding_mode="reflect")
    with pytest.raises(ValueError, match="bias"):
        conv2d(x, Tensor(np.zeros((2, 4, 3, 3))), Tensor(np.zeros(3)))


def test_depthwise_equals_blockdiagonal_dense():
    rng = np.random.default_rng(4)
    c = 5
    x = rng.normal(size=(2, c, 6, 6))
    wd = rng.normal(size=(c, 1, 3, 3))
    dense = np.zeros((c, c, 3, 3))
    for ci in range(c):
        dense[ci, ci] = wd[ci, 0]
    got = conv2d(Tensor(x), Tensor(wd), groups=c).data
    want = conv2d(Tensor(x), Tensor(dense)).data
    np.testing.assert_allclose(got, want, rtol=1e-12)


@pytest.mark.parametrize("kwargs,cg", [
    ({"stride": 2}, 4),
    ({"dilation": 2}, 4),
    ({"groups": 2}, 2),
    ({"padding_mode": "replicate"}, 4),
])
def test_conv2d_grads(kwargs, cg):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4, 5, 5))
    w = rng.normal(size=(2, cg, 3, 3))
    b = rng.normal(size=2)

    def run(xt, wt, bt):
        out = conv2d(xt, wt, bt, **kwargs)
        v = Tensor(np.cos(np.arange(out.size, dtype=np.float64)).reshape(out.shape))
        return (out * v).sum()

    xt = Tensor(x.copy(), requires_grad=True)
    wt = Tensor(w.copy(), requires_grad=True)
    bt = Tensor(b.copy(), requires_grad=True)
    gx, gw, gb = gradients(run(xt, wt, bt), [xt, wt, bt])
    for g, hold, arr in ((gx, "x", x), (gw, "w", w), (gb, "b", b)):
        def f(t, hold=hold):
            parts = {"x": Tensor(x), "w": Tensor(w), "b": Tensor(b)}
            parts[hold] = t
            return float(run(parts["x"], parts["w"], parts["b"]).item())
        num = finite_diff_grad(f, Tensor(arr.copy()), eps=1e-6)
        assert max_rel_error(g, num) < 1e-7


def test_neighbors_ordering_and_padding():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    out = neighbors(Tensor(x), 3).data  # replicate padding
    # at the center pixel, tap q = i*3 + j is the value at grid position (i, j)
    np.testing.assert_array_equal(out[0, 0, :, 1, 1], np.arange(9.0))
    assert out[0, 0, 4, 0, 0] == 0.0            # center tap is the pixel itself
    assert out[0, 0, 0, 0, 0] == 0.0            # corner clamps to the edge value
    out_z = neighbors(Tensor(x), 3, padding_mode="zero").data
    assert out_z[0, 0, 0, 0, 0] == 0.0
    assert out_z[0, 0, 8, 2, 2] == 0.0          # bottom-right neighbor off the edge
    assert out_z[0, 0, 8, 1, 1] == 8.0
    with pytest.raises(ValueError, match="odd"):
        neighbors(Tensor(x), 2)


def test_neighbors_grad():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 2, 4, 4))
    for mode in ("replicate", "zero"):
        xt = Tensor(x.copy(), requires_grad=True)
        v = Tensor(rng.normal(size=(1, 2, 9, 4, 4)))
        (g,) = gradients((neighbors(xt, 3, mode) * v).sum(), [xt])
        num = finite_diff_grad(
            lambda t: float((neighbors(t, 3, mode) * v).sum().item()),
            Tensor(x.copy()), eps=1e-6)
        assert max_rel_error(g, num) < 1e-7


def test_pixel_shuffle_subpixel_order():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
    out = pixel_shuffle(Tensor(x), 2).data
    np.testing.assert_array_equal(out[0, 0], [[1.0, 2.0], [3.0, 4.0]])


def test_pixel_shuffle_shapes_and_roundtrip():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 8, 3, 5))
    up = pixel_shuffle(Tensor(x), 2)
    assert up.shape == (2, 2, 6, 10)
    back = pixel_unshuffle(up, 2).data
    np.testing.assert_array_equal(back, x)
    y = rng.normal(size=(1, 3, 4, 6))
    np.testing.assert_array_equal(pixel_shuffle(pixel_unshuffle(Tensor(y), 2), 2).data, y)
    assert sorted(up.data.ravel()) == sorted(x.ravel())  # multiset preserved
    with pytest.raises(ValueError, match="not divisible"):
        pixel_shuffle(Tensor(np.zeros((1, 6, 2, 2))), 2)
    with pytest.raises(ValueError, match="not divisible"):
        pixel_unshuffle(Tensor(np.zeros((1, 2, 5, 4))), 2)


def test_bilinear_sample_identity_and_midpoint():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 3, 4, 5))
    rr = np.broadcast_to(np.arange(4.0)[None, :, None], (1, 4, 5)).copy()
    cc = np.broadcast_to(np.arange(5.0)[None, None, :], (1, 4, 5)).copy()
    out = bilinear_sample(Tensor(x), Tensor(rr), Tensor(cc)).data
    np.testing.assert_array_equal(out, x)

    pair = np.array([[0.0, 10.0]]).reshape(1, 1, 1, 2)
    mid = bilinear_sample(Tensor(pair), Tensor(np.zeros((1, 1, 1))),
                          Tensor(np.full((1, 1, 1), 0.5))).data
    assert mid.item() == 5.0


def test_bilinear_sample_manual_cell():
    x = np.array([[1.0, 2.0], [3.0, 5.0]]).reshape(1, 1, 2, 2)
    out = bilinear_sample(Tensor(x), Tensor(np.full((1, 1, 1), 0.25)),
                          Tensor(np.full((1, 1, 1), 0.75))).data
    want = (1 - 0.25) * ((1 - 0.75) * 1 + 0.75 * 2) + 0.25 * ((1 - 0.75) * 3 + 0.75 * 5)
    assert abs(out.item() - want) < 1e-12


def test_bilinear_sample_clamping():
    x = np.arange(12.0).reshape(1, 1, 3, 4)
    out = bilinear_sample(Tensor(x), Tensor(np.full((1, 1, 1), -3.7)),
                          Tensor(np.full((1, 1, 1), 1.0))).data
    ref = bilinear_sample(Tensor(x), Tensor(np.zeros((1, 1, 1))),
                          Tensor(np.full((1, 1, 1), 1.0))).data
    np.testing.assert_array_equal(out, ref)
    far = bilinear_sample(Tensor(x), Tensor(np.full((1, 1, 1), 99.0)),
                          Tensor(np.full((1, 1, 1), 99.0))).data
    assert far.item() == 11.0


def test_bilinear_sample_clamped_coord_grad_is_zero():
    x = Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
    rows = Tensor(np.array([[[-0.5, 1.2]]]), requires_grad=True)
    cols = Tensor(np.array([[[1.0, 5.0]]]), requires_grad=True)
    out = bilinear_sample(x, rows, cols)
    gr, gc = gradients(out.sum(), [rows, cols])
    assert gr[0, 0, 0] == 0.0   # row out of range
    assert gc[0, 0, 1] == 0.0   # col out of range
    assert gr[0, 0, 1] != 0.0


def test_bilinear_sample_3d_and_degenerate():
    rng = np.random.default_rng(9)
    x3 = rng.normal(size=(2, 3, 3))
    out3 = bilinear_sample(Tensor(x3), np.ones((3, 3)) * 0.5, np.ones((3, 3)) * 0.5)
    assert out3.shape == (2, 3, 3)
    one = bilinear_sample(Tensor(np.full((1, 1, 1, 1), 7.0)),
                          Tensor(np.full((1, 2, 2), 0.3)), Tensor(np.full((1, 2, 2), -1.0)))
    np.testing.assert_array_equal(one.data, np.full((1, 1, 2, 2), 7.0))
    with pytest.raises(ValueError, match="coordinate shapes"):
        bilinear_sample(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 2))),
                        Tensor(np.zeros((1, 2))))


def test_bilinear_sample_grads():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 2, 5, 5))
    rr = rng.uniform(0.3, 3.7, size=(1, 3, 3))
    cc = rng.uniform(0.3, 3.7, size=(1, 3, 3))
    v = Tensor(rng.normal(size=(1, 2, 3, 3)))

    def run(xt, rt, ct):
        return (bilinear_sample(xt, rt, ct) * v).sum()

    xt = Tensor(x.copy(), requires_grad=True)
    rt = Tensor(rr.copy(), requires_grad=True)
    ct = Tensor(cc.copy(), requires_grad=True)
    gx, gr, gc = gradients(run(xt, rt, ct), [xt, rt, ct])
    for g, hold, arr in ((gx, "x", x), (gr, "r", rr), (gc, "c", cc)):
        def f(t, hold=hold):
            parts = {"x": Tensor(x), "r": Tensor(rr), "c": Tensor(cc)}
            parts[hold] = t
            return float(run(parts["x"], parts["r"], parts["c"]).item())
        num = finite_diff_grad(f, Tensor(arr.copy()), eps=1e-6)
        assert max_rel_error(g, num) < 1e-6


def test_bilinear_resize_identity_and_2x():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 2, 3, 4))
    np.testing.assert_array_equal(bilinear_resize(Tensor(x), 3, 4).data, x)
    line = np.array([2.0, 6.0]).reshape(1, 1, 1, 2)
    up = bilinear_resize(Tensor(line), 1, 4).data.ravel()
    np.testing.assert_allclose(up, [2.0, 3.0, 5.0, 6.0], rtol=1e-12)
    const = bilinear_resize(Tensor(np.full((1, 1, 2, 2), 3.5)), 5, 7).data
    np.testing.assert_allclose(const, 3.5, rtol=1e-15)


def test_layer_norm_properties():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(4, 6)) * 3 + 1
    g, b = Tensor(np.ones(6)), Tensor(np.zeros(6))
    out = layer_norm(Tensor(x), g, b).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-4)
    const = layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)),
                       Tensor(np.zeros(5))).data
    np.testing.assert_allclose(const, 0, atol=1e-9)
    ln = LayerNorm(6)
    np.testing.assert_allclose(ln(Tensor(x)).data, out, rtol=1e-12)


def test_batch_norm_train_and_eval():
    rng = np.random.default_rng(14)
    bn = BatchNorm2d(3)
    x = rng.normal(1.5, 2.0, size=(4, 3, 2, 2))
    out = bn(Tensor(x), training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1, atol=1e-3)
    n = x.size // 3
    want_mean = 0.9 * 0 + 0.1 * x.mean(axis=(0, 2, 3))
    want_var = 0.9 * 1 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(bn.running_mean.data, want_mean, rtol=1e-10)
    np.testing.assert_allclose(bn.running_var.data, want_var, rtol=1e-10)

    # eval path applies the stored statistics directly
    bn2 = BatchNorm2d(2)
    bn2.running_mean = buffer(np.array([1.0, -1.0]))
    bn2.running_var = buffer(np.array([4.0, 0.25]))
    y = np.array([3.0, 0.0]).reshape(1, 2, 1, 1)
    out2 = bn2(Tensor(np.broadcast_to(y, (1, 2, 1, 1)).copy())).data.ravel()
    np.testing.assert_allclose(out2, [(3 - 1) / np.sqrt(4 + 1e-5),
                                      (0 + 1) / np.sqrt(0.25 + 1e-5)], rtol=1e-7)

    with pytest.raises(ValueError, match="batch size"):
        bn(Tensor(np.zeros((1, 3, 2, 2))), training=True)


def test_linear_matches_matmul():
    rng = np.random.default_rng(15)
    lin = Linear(4, 3, rng)
    x = rng.normal(size=(5, 4))
    want = x @ lin.weight.data + lin.bias.data
    np.testing.assert_allclose(lin(Tensor(x)).data, want, rtol=1e-12)
