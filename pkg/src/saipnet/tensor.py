"""Dense float tensors with reverse-mode differentiation.

A Tensor wraps a numpy array and records how it was produced (parent links
plus a vector-Jacobian closure).  That implicit graph is the gradient tape:
calling ``gradients(loss, leaves)`` replays it backwards and returns one
gradient array per leaf, with exact zeros for leaves the loss never touched.
Tensors are immutable values once produced; every op returns a fresh node.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

# Default element type.  float64 is reserved for gradient audits; flip it
# with the `precision` context manager rather than touching this directly.
_DEFAULT_DTYPE = np.float32

# When true, every node creation verifies all elements are finite.  Tests
# switch this on; it stays off in training loops for speed.
_CHECK_FINITE = False


def default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Context manager selecting 32- or 64-bit floats for new tensors."""

    def __init__(self, bits: int):
        if bits not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {bits}")
        self._dtype = np.float32 if bits == 32 else np.float64

    def __enter__(self):
        global _DEFAULT_DTYPE
        self._saved = _DEFAULT_DTYPE
        _DEFAULT_DTYPE = self._dtype
        return self

    def __exit__(self, *exc):
        global _DEFAULT_DTYPE
        _DEFAULT_DTYPE = self._saved
        return False


class check_finite:
    """Context manager enabling the per-op finiteness assertion."""

    def __init__(self, enabled: bool = True):
        self._enabled = enabled

    def __enter__(self):
        global _CHECK_FINITE
        self._saved = _CHECK_FINITE
        _CHECK_FINITE = self._enabled
        return self

    def __exit__(self, *exc):
        global _CHECK_FINITE
        _CHECK_FINITE = self._saved
        return False


class Tensor:
    """Immutable dense array node; leaves with requires_grad=True are the
    trainable parameters the tape tracks."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._needs_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # arithmetic sugar; all graph building happens in the module functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Leaf tensor marked trainable."""
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def buffer(data, name: Optional[str] = None) -> Tensor:
    """Leaf tensor persisted with the model but never optimized (e.g. running stats)."""
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=False, name=name)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if any(p._needs_grad for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
        out._needs_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data
    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb
    return _node(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = a.data ** e
    return _node(out, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * (0.5 / out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _node(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never sees a positive argument (no fp32 overflow).
    x = a.data
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions, shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).astype(a.data.dtype, copy=True),)
    return _node(np.asarray(out), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else (
        np.prod([a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    )
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)
    return _node(np.array(out, copy=True), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(tensors))
        )
    return _node(out, tensors, vjp)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0 by an integer index array."""
    idx = np.asarray(indices)
    out = a.data[idx]
    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *a.data.shape[1:]))
        return (full,)
    return _node(np.array(out, copy=True), (a,), vjp)


def pad2d(a: Tensor, pad: int, mode: str = "zero") -> Tensor:
    """Pad the last two axes by `pad` on every side (zero or replicate)."""
    if pad == 0:
        return a
    if mode not in ("zero", "replicate"):
        raise ValueError(f"unknown padding mode {mode!r}")
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width, mode="constant" if mode == "zero" else "edge")
    def vjp(g):
        return (_fold_pad(g, pad) if mode == "replicate" else g[..., pad:-pad, pad:-pad],)
    return _node(out, (a,), vjp)


def _fold_pad(g: np.ndarray, pad: int) -> np.ndarray:
    # adjoint of edge replication: fold padded rows, then padded columns
    core = np.array(g[..., pad:-pad, :], copy=True)
    core[..., 0:1, :] += g[..., :pad, :].sum(axis=-2, keepdims=True)
    core[..., -1:, :] += g[..., -pad:, :].sum(axis=-2, keepdims=True)
    out = np.array(core[..., :, pad:-pad], copy=True)
    out[..., :, 0:1] += core[..., :, :pad].sum(axis=-1, keepdims=True)
    out[..., :, -1:] += core[..., :, -pad:].sum(axis=-1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# matmul, softmax


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)
    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)
    return _node(out, (a, b), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponentials along `axis`; slices sum to 1 and ordering is preserved."""
    if a.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._needs_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(loss: Tensor, leaves: Sequence[Tensor]) -> list:
    """Reverse-mode gradients of a scalar loss for each leaf tensor.

    Leaves the loss does not reach get exact-zero gradients of their own shape.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grad_of = {id(loss): np.ones_like(loss.data)}
    wanted = {id(l) for l in leaves}
    if loss._needs_grad:
        for node in reversed(_toposort(loss)):
            g = grad_of.get(id(node))
            if g is None:
                continue
            if node._vjp is not None:
                parent_grads = node._vjp(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p._needs_grad:
                        continue
                    acc = grad_of.get(id(p))
                    grad_of[id(p)] = pg if acc is None else acc + pg
            if id(node) not in wanted:
                del grad_of[id(node)]  # free intermediate grads eagerly
    return [
        grad_of.get(id(l), np.zeros_like(l.data)).astype(l.data.dtype, copy=False)
        for l in leaves
    ]


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element.

    Uses the actually-representable step (x+eps) - (x-eps) as the divisor,
    which matters in 32-bit floats.
    """
    base = np.array(x.data, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi_x = flat[i]
        hi = float(f(Tensor(base.copy())))
        flat[i] = orig - eps
        lo_x = flat[i]
        lo = float(f(Tensor(base.copy())))
        flat[i] = orig
        gflat[i] = (hi - lo) / float(hi_x - lo_x)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Infinity-norm relative disagreement between two gradient estimates.

    `floor` bounds the denominator from below; gradient audits set it to 1 so
    that parameters with structurally zero gradients compare absolutely and
    finite-difference rounding noise cannot masquerade as disagreement.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


# ---------------------------------------------------------------------------
# parameter trees


class Module:
    """Plain container whose Tensor attributes form a named parameter tree.

    Attribute insertion order fixes the walk order, which keeps checkpoint
    layout and optimizer state deterministic.
    """

    def named_tensors(self, prefix: str = "") -> Iterable[tuple]:
        for name, _, _, t in _walk(self, prefix):
            yield name, t

    def parameters(self) -> list:
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def map_parameters(self, fn: Callable) -> None:
        """Replace each trainable tensor with fn(name, tensor); None keeps it."""
        for name, owner, key, t in _walk(self, ""):
            if not t.requires_grad:
                continue
            new = fn(name, t)
            if new is None:
                continue
            replacement = Tensor(np.asarray(new, dtype=t.data.dtype), requires_grad=True,
                                 name=t.name)
            if isinstance(key, int):
                owner[key] = replacement
            else:
                setattr(owner, key, replacement)

    def load_tensors(self, mapping: dict) -> None:
        """Replace every named tensor from `mapping`; shapes must match."""
        sites = list(_walk(self, ""))
        have = {name for name, _, _, _ in sites}
        missing = [k for k in mapping if k not in have]
        if missing:
            raise KeyError(f"unknown tensor name {missing[0]!r}")
        for name, owner, key, t in sites:
            if name not in mapping:
                raise KeyError(f"checkpoint missing tensor {name!r}")
            new = mapping[name]
            if tuple(new.shape) != tuple(t.data.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: model {tuple(t.data.shape)}, file {tuple(new.shape)}"
                )
            replacement = Tensor(
                np.asarray(new, dtype=t.data.dtype), requires_grad=t.requires_grad, name=t.name
            )
            if isinstance(key, int):
                owner[key] = replacement
            else:
                setattr(owner, key, replacement)


def _walk(obj, prefix: str):
    if isinstance(obj, Module):
        for attr, value in vars(obj).items():
            yield from _walk_value(value, obj, attr, f"{prefix}{attr}" if not prefix else f"{prefix}.{attr}")


def _walk_value(value, owner, key, name: str):
    if isinstance(value, Tensor):
        yield name, owner, key, value
    elif isinstance(value, Module):
        yield from _walk(value, name)
    elif isinstance(value, list):
        for i, item in enumerate(value):
            yield from _walk_value(item, value, i, f"{name}.{i}")
