"""High-pass stem: window closed forms, kernel normalization, spectral behavior."""

import numpy as np
import pytest

from saipnet.gradaudit import audit_module
from saipnet.stem import LhpfLayer, LhpfStem, hamming_window, lhpf_layer, modulated_kernels
from saipnet.tensor import Tensor, gelu, parameter, precision


@pytest.fixture(autouse=True)
def _f64():
    with precision(64):
        yield


def test_hamming_window_closed_form():
    win = hamming_window(3)
    h = np.array([0.08, 1.0, 0.08])
    np.testing.assert_allclose(win, np.outer(h, h), atol=1e-12)
    assert abs(win[1, 1] - 1.0) < 1e-12
    assert abs(win[0, 0] - 0.0064) < 1e-12
    assert np.all(win > 0)


@pytest.mark.parametrize("k", [3, 5, 7])
def test_hamming_window_symmetry(k):
    win = hamming_window(k)
    np.testing.assert_allclose(win, win.T, atol=0)
    np.testing.assert_allclose(win, win[::-1], atol=1e-12)
    np.testing.assert_allclose(win, win[:, ::-1], atol=1e-12)
    assert np.all(win > 0)


def test_hamming_window_rejections():
    with pytest.raises(ValueError, match="odd"):
        hamming_window(4)
    with pytest.raises(ValueError, match=">= 3"):
        hamming_window(1)


def test_modulated_kernels_sum_to_one():
    rng = np.random.default_rng(0)
    for scale in (0.01, 1.0, 50.0):
        w_l = parameter(rng.normal(0.0, scale, (6, 1, 9)))
        kern = modulated_kernels(w_l).data
        np.testing.assert_allclose(kern.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(kern > 0)
    with pytest.raises(ValueError, match="kernel weights"):
        modulated_kernels(parameter(rng.normal(size=(6, 1, 8))))


def test_lhpf_layer_annihilates_constants_exactly():
    rng = np.random.default_rng(1)
    w_l = parameter(rng.normal(0.0, 1.0, (4, 1, 9)))
    x = Tensor(np.full((2, 4, 6, 6), 7.25))
    out = lhpf_layer(x, w_l).data
    assert np.all(out == 0.0)  # borders included


def test_lhpf_layer_step_edge_localized_and_antisymmetric():
    """Uniform tap logits give a symmetric kernel; a step responds only at the
    two pixels flanking the edge, with opposite signs."""
    w_l = parameter(np.zeros((1, 1, 9)))
    x = np.zeros((1, 1, 1, 8))
    x[..., 4:] = 1.0
    out = lhpf_layer(Tensor(x), w_l).data.ravel()
    np.testing.assert_allclose(out[:3], 0.0, atol=1e-15)
    np.testing.assert_allclose(out[5:], 0.0, atol=1e-15)
    assert out[4] > 0 > out[3]
    np.testing.assert_allclose(out[3], -out[4], atol=1e-12)
    # closed form: the collapsed 1d kernel is hamming([0.08, 1, 0.08]) norm'd
    np.testing.assert_allclose(out[4], 0.08 / 1.16, atol=1e-12)


def test_stem_shapes_and_geometry_rejection():
    rng = np.random.default_rng(2)
    stem = LhpfStem(32, rng)
    out = stem(Tensor(rng.normal(size=(2, 3, 64, 64))))
    assert out.shape == (2, 32, 16, 16)
    with pytest.raises(ValueError, match="divisible by 4"):
        stem(Tensor(np.zeros((1, 3, 30, 32))))


def test_stem_constant_image_zeroes_each_lhpf_sublayer():
    rng = np.random.default_rng(3)
    stem = LhpfStem(8, rng)
    const = Tensor(np.full((1, 3, 16, 16), 0.4))
    first = stem.lhpf1(const)
    assert np.all(first.data == 0.0)
    mid = gelu(stem.down1(stem.point1(first)))
    second = stem.lhpf2(mid)
    assert np.all(second.data == 0.0)
    # the final map is a per-channel constant fixed by the convolution biases
    out = stem(const).data
    assert all(np.ptp(out[0, c]) == 0.0 for c in range(out.shape[1]))


def test_stem_prefers_high_frequency_content():
    """Residual energy on a smooth field is tiny next to field + checkerboard."""
    rng = np.random.default_rng(4)
    stem = LhpfStem(8, rng)
    yy, xx = np.mgrid[0:64, 0:64].astype(np.float64)
    smooth = (np.sin(2 * np.pi * xx / 64) + np.cos(2 * np.pi * (yy + xx) / 48)
              + 0.5 * np.sin(2 * np.pi * yy / 32))
    smooth = np.broadcast_to(smooth, (1, 3, 64, 64)).copy()
    checker = np.where((xx.astype(int) + yy.astype(int)) % 2 == 0, 1.0, -1.0)
    mixed = smooth + np.broadcast_to(checker, (1, 3, 64, 64))

    low = np.abs(stem(Tensor(smooth)).data).mean()
    high = np.abs(stem(Tensor(mixed)).data).mean()
    assert high >= 10.0 * low


def test_lhpf_layer_kernels_export():
    rng = np.random.default_rng(5)
    layer = LhpfLayer(5, rng)
    kern = layer.kernels().data
    assert kern.shape == (5, 1, 9)
    np.testing.assert_allclose(kern.sum(axis=-1), 1.0, atol=1e-6)


def test_stem_gradcheck():
    err, name = audit_module("stem", seeds=3, bits=64)
    assert err < 1e-5, name
