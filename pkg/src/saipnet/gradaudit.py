"""Finite-difference gradient audits for every differentiable module.

Each registry entry builds a small instance of one module, runs it on a
random input, and reduces the output to a scalar through a fixed random
projection.  Analytic gradients from the reverse pass are then compared
against central finite differences on a deterministic sample of
coordinates per tensor.  Relative errors use a floor of 1.0 in the
denominator so structurally zero gradients (which finite differences can
only measure as rounding noise) are judged by absolute error.
"""

from __future__ import annotations

import numpy as np

from .tensor import Module, Tensor, gradients, max_rel_error, parameter, precision
from .encoder import PooledAttentionBlock
from .saff import SaffBlock
from .cdc import Cdc
from .stem import LhpfStem
from .network import hybrid_loss

TOLERANCES = {32: 1e-2, 64: 1e-5}
_FD_EPS = {32: 1e-3, 64: 1e-6}


def _build_encoder(rng: np.random.Generator):
    block = PooledAttentionBlock(8, 8, heads=2, grid_in=(4, 4), rng=rng,
                                 q_stride=1, kv_stride=2)
    x = parameter(rng.normal(size=(1, 16, 8)), name="tokens")
    return block, [x], lambda: block(x, (4, 4))[0]


def _build_saff(rng: np.random.Generator, ratio: int):
    c_x, c_y = 4, 8
    block = SaffBlock(c_x, c_y if ratio == 2 else c_x, rng, ratio=ratio)
    # Audit at a generic point: the zero-initialized heads would pin offsets to
    # exactly 0, where bilinear sampling sits on its piecewise-linear corners
    # and central differences straddle the kink.
    for head in (block.lp1, block.hp1, block.lp2, block.hp2, block.off_d):
        head.weight.data[...] = rng.normal(scale=0.1, size=head.weight.shape)
        head.bias.data[...] = rng.normal(scale=0.1, size=head.bias.shape)
    x = parameter(rng.normal(size=(1, c_x, 8, 8)), name="x")
    y_c = c_y if ratio == 2 else c_x
    y_r = 4 if ratio == 2 else 8
    y = parameter(rng.normal(size=(1, y_c, y_r, y_r)), name="y")
    return block, [x, y], lambda: block(x, y)


def _build_cdc(rng: np.random.Generator):
    layer = Cdc(6, rng, dilations=(1, 2, 3))
    x = parameter(rng.normal(size=(2, 6, 8, 8)), name="x")
    return layer, [x], lambda: layer(x, training=True)


def _build_stem(rng: np.random.Generator):
    stem = LhpfStem(4, rng)
    x = parameter(rng.normal(size=(1, 3, 16, 16)), name="image")
    return stem, [x], lambda: stem(x)


class _LossShim(Module):
    """Wraps the loss so the audit loop can treat it like a module."""

    def __init__(self):
        pass


def _build_loss(rng: np.random.Generator):
    logits = parameter(rng.normal(size=(2, 3, 8, 8)), name="logits")
    labels = rng.integers(0, 3, size=(2, 8, 8))
    lam = float(rng.uniform(0.1, 0.9))
    return _LossShim(), [logits], lambda: hybrid_loss(logits, labels, lam)


def _builders(seed_index: int) -> dict:
    # alternate the fusion ratio so both low-pass paths get audited
    ratio = 2 if seed_index % 2 == 0 else 1
    return {
        "encoder": _build_encoder,
        "saff": lambda rng: _build_saff(rng, ratio),
        "cdc": _build_cdc,
        "stem": _build_stem,
        "loss": _build_loss,
    }


MODULES = ("encoder", "saff", "cdc", "stem", "loss")


def _sample_coords(rng: np.random.Generator, size: int, limit: int) -> np.ndarray:
    if size <= limit:
        return np.arange(size)
    return rng.choice(size, size=limit, replace=False)


def _analytic_grads(name: str, s: int, bits: int, seed_base: int):
    """Leaf names and analytic gradients for one instance built at `bits`."""
    with precision(bits):
        rng = np.random.default_rng(seed_base + s)
        module, inputs, forward = _builders(s)[name](rng)
        out = forward()
        proj = Tensor(np.random.default_rng(seed_base + 7919 + s).normal(size=out.shape))
        loss = (out * proj).sum()
        leaves = list(inputs) + module.parameters()
        names = [t.name or "input" for t in inputs]
        names += [n for n, t in module.named_tensors() if t.requires_grad]
        grads = gradients(loss, leaves)
    return names, grads


def audit_module(name: str, seeds: int = 20, bits: int = 32,
                 coords_per_tensor: int = 5, seed_base: int = 1000):
    """Worst sampled relative gradient error over `seeds` random instances.

    Returns (worst_error, tensor_name).  Analytic gradients come from a
    graph built at the audited precision; the finite-difference reference
    probes a 64-bit twin built from the same seed, so the reference is not
    drowned in 32-bit rounding of the loss values.  The loss is recomputed
    from scratch for every probe, so batch-stat layers cannot leak state
    between evaluations.
    """
    if name not in MODULES:
        raise KeyError(f"unknown audit module {name!r}, expected one of {MODULES}")
    if bits not in TOLERANCES:
        raise ValueError(f"bits must be 32 or 64, got {bits}")
    eps = _FD_EPS[64]
    worst = 0.0
    worst_tensor = ""
    for s in range(seeds):
        names, grads = _analytic_grads(name, s, bits, seed_base)
        with precision(64):
            rng = np.random.default_rng(seed_base + s)
            module, inputs, forward = _builders(s)[name](rng)
            proj = Tensor(np.random.default_rng(seed_base + 7919 + s).normal(
                size=forward().shape))

            def loss_value() -> float:
                return float((forward() * proj).sum().item())
            leaves = list(inputs) + module.parameters()
            coord_rng = np.random.default_rng(seed_base + 104729 + s)
            for leaf, g, lname in zip(leaves, grads, names):
                flat = leaf.data.reshape(-1)
                idx = _sample_coords(coord_rng, flat.size, coords_per_tensor)
                fd = np.zeros(idx.size)
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = loss_value()
                    flat[i] = orig - eps
                    down = loss_value()
                    flat[i] = orig
                    denom = (orig + eps) - (orig - eps)
                    fd[j] = (up - down) / denom if denom != 0 else 0.0
                err = max_rel_error(np.asarray(g, dtype=np.float64).reshape(-1)[idx],
                                    fd, floor=1.0)
                if err > worst:
                    worst = err
                    worst_tensor = lname
    return worst, worst_tensor


def run_audit(modules=MODULES, seeds: int = 20, bits: int = 32) -> dict:
    """Audit several modules; returns {name: (worst_error, tensor_name)}."""
    return {m: audit_module(m, seeds=seeds, bits=bits) for m in modules}
