"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and records the operation that produced it.
``backprop`` walks the recorded graph in reverse topological order and
accumulates gradients into every participating leaf. Only the operations
the pipeline needs are implemented; all of them are exercised against
central finite differences in the test suite.

Gradients keep the dtype of the forward pass (float32 for training,
float64 for oracle checks).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap ``x`` as a constant Tensor, matching ``like``'s float dtype."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.data.dtype:
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), backward)


def power(a: Tensor, k) -> Tensor:
    k = float(k)
    out_data = a.data ** k

    def backward(g):
        _accum(a, g * (k * a.data ** (k - 1.0)))

    return _node(out_data, (a,), backward)


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _node(out_data, (a,), backward)


def tsqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (0.5 / out_data))

    return _node(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _node(out_data, (a,), backward)


def _sigmoid(x):
    # evaluated piecewise to stay finite for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _node(s, (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    out_data = a.data * s

    def backward(g):
        _accum(a, g * (s + a.data * s * (1.0 - s)))

    return _node(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated as max(x,0) + log1p(exp(-|x|))."""
    x = a.data
    out_data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)

    def backward(g):
        _accum(a, g * s)

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _node(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    n = a.data.dtype.type(n)

    def backward(g):
        if axis is None:
            _accum(a, np.full_like(a.data, g / n) if not np.ndim(g) else np.broadcast_to(g / n, a.data.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg / n, a.data.shape))

    return _node(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(old))

    return _node(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _node(out_data, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(out_data, tuple(tensors), backward)


def stack(tensors, axis=0) -> Tensor:
    return concat([reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:]) for t in tensors], axis=axis)


def tslice(a: Tensor, idx) -> Tensor:
    """Basic indexing (ints and slices, steps allowed)."""
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        _accum(a, full)

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError("matmul requires tensors of rank >= 2")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# spatial ops (NCHW layout, stride 1, square kernels)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), stride 1.

    x: (N, C, H, W), w: (O, C, kh, kw), b: (O,) or None.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractError("conv2d expects x (N,C,H,W) and w (O,C,kh,kw)")
    if x.data.shape[1] != w.data.shape[1]:
        raise ContractError(
            f"conv2d channel mismatch: input has {x.data.shape[1]}, kernel expects {w.data.shape[1]}"
        )
    n, c, h, wd = x.data.shape
    o, _, kh, kw = w.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = xp.shape[2] - kh + 1
    wo = xp.shape[3] - kw + 1
    if ho <= 0 or wo <= 0:
        raise ContractError("conv2d kernel larger than padded input")

    patches = np.empty((n, c, kh, kw, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
    col = patches.reshape(n, c * kh * kw, ho * wo)
    w2 = w.data.reshape(o, c * kh * kw)
    out_data = np.matmul(w2, col).reshape(n, o, ho, wo)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        gw = np.matmul(g2, col.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, kh, kw)
        _accum(w, gw)
        if x.requires_grad:
            gcol = np.matmul(w2.T, g2)  # (n, c*kh*kw, ho*wo)
            gpatch = gcol.reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += gpatch[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accum(x, gxp)

    return _node(out_data, parents, backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ContractError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {k}")
    out_data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    scale = x.data.dtype.type(1.0 / (k * k))

    def backward(g):
        gg = np.broadcast_to(g[:, :, :, None, :, None], (n, c, h // k, k, w // k, k))
        _accum(x, (gg * scale).reshape(n, c, h, w))

    return _node(out_data, (x,), backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    n, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row softmax, shifted by a detached max for stability."""
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = texp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    out = add(tlog(tsum(texp(sub(a, shift)), axis=axis, keepdims=True)), shift)
    if not keepdims:
        ax = axis % a.data.ndim
        squeezed = out.data.shape[:ax] + out.data.shape[ax + 1:]
        out = reshape(out, squeezed)
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.data.shape != b.data.shape:
        raise ContractError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    d = sub(a, b)
    return tmean(mul(d, d))


# ---------------------------------------------------------------------------
# backward driver and the finite-difference oracle
# ---------------------------------------------------------------------------

def backprop(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every participating leaf."""
    if loss.data.size != 1:
        raise ContractError("backprop requires a scalar loss")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def collect_grads(params: dict) -> dict:
    """Gradients per named parameter; zeros for parameters outside the graph."""
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


def finite_diff_grad(loss_fn, params: dict, h: float = 1e-4) -> dict:
    """Central finite differences (f(p+h) - f(p-h)) / 2h, per coordinate.

    ``loss_fn`` is re-evaluated after every in-place perturbation, so the
    parameters should be float64 for the estimate to be meaningful.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad requires h > 0")
    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f1 = float(loss_fn().data)
            flat[i] = orig - h
            f2 = float(loss_fn().data)
            flat[i] = orig
            g[i] = (f1 - f2) / (2.0 * h)
        grads[name] = g.reshape(p.data.shape)
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    """max over coordinates of |a - n| / max(floor, |a|, |n|)."""
    worst = 0.0
    for name in analytic:
        a = np.asarray(analytic[name], dtype=np.float64)
        n = np.asarray(numeric[name], dtype=np.float64)
        denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def sinusoidal_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps: (len(t), dim).

    freqs_i = exp(-ln(10000) * i / half) for i in 0..half-1,
    output = [sin(t * freqs), cos(t * freqs)].
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(dtype)
