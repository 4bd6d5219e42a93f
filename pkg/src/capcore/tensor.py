"""Deterministic float64 tensors with tape-based reverse-mode differentiation.

All reductions (sums, matrix contractions) run in a fixed order so results are
bit-reproducible and independent of how many rows are processed together.
Contractions accumulate sequentially over the inner index; plain sums use a
zero-padded power-of-two halving tree.  Both schemes are invariant under
appending trailing zeros, which is what makes masked teacher-forced decoding
agree bit-for-bit with incremental decoding.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_node_counter = itertools.count()
_narrow = False


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def narrow_activations(enabled: bool = True):
    """Round every op output to float16 precision while active.

    This emulates the activation side of mixed-precision training; gradients
    and optimizer state stay float64.
    """
    global _narrow
    prev = _narrow
    _narrow = enabled
    try:
        yield
    finally:
        _narrow = prev


class Rng:
    """Seeded PCG64 stream (numpy's ``Generator``), identical across platforms.

    ``seed`` may be an int or a tuple of ints (e.g. ``(seed, epoch)``).
    """

    algorithm = "PCG64"

    def __init__(self, seed):
        self.seed = tuple(int(s) for s in seed) if isinstance(seed, (tuple, list)) else int(seed)
        key = list(self.seed) if isinstance(self.seed, tuple) else self.seed
        self.gen = np.random.Generator(np.random.PCG64(key))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.gen.standard_normal(size=tuple(shape)) * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.gen.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int, shape=None):
        return self.gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


# ---------------------------------------------------------------------------
# fixed-order reductions


def tree_sum(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` with a zero-padded power-of-two halving tree."""
    x = np.moveaxis(np.asarray(x, dtype=DTYPE), axis, 0)
    n = x.shape[0]
    if n == 0:
        out = np.zeros(x.shape[1:], dtype=DTYPE)
    else:
        size = 1 << (n - 1).bit_length()
        if size != n:
            pad = np.zeros((size - n,) + x.shape[1:], dtype=DTYPE)
            x = np.concatenate([x, pad], axis=0)
        while x.shape[0] > 1:
            half = x.shape[0] // 2
            x = x[:half] + x[half:]
        out = x[0]
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def sum_all(x: np.ndarray) -> float:
    return float(tree_sum(np.asarray(x, dtype=DTYPE).reshape(-1), 0))


_SCAN_LIMIT = 1 << 18


def seq_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with the inner index accumulated in ascending order.

    Leading (batch) dimensions broadcast like ``np.matmul``.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    k = a.shape[-1]
    if b.shape[-2] != k:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    if k == 0:
        return np.zeros(out_shape, dtype=DTYPE)
    if math.prod(out_shape) * k <= _SCAN_LIMIT:
        # add.accumulate is a strict left-to-right scan: same bits as the loop
        prod = a[..., :, :, None] * b[..., None, :, :]
        return np.add.accumulate(prod, axis=-2)[..., -1, :]
    acc = np.zeros(out_shape, dtype=DTYPE)
    tmp = np.empty(out_shape, dtype=DTYPE)
    for i in range(k):
        np.multiply(a[..., :, i : i + 1], b[..., i : i + 1, :], out=tmp)
        acc += tmp
    return acc


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = tree_sum(grad, 0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = tree_sum(grad, ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph


class Node:
    __slots__ = ("seq", "parents", "backward", "freed")

    def __init__(self, parents, backward):
        self.seq = next(_node_counter)
        self.parents = parents
        self.backward = backward
        self.freed = False


class Tensor:
    """An n-dimensional float array that can participate in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # -- basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __hash__ = object.__hash__

    # -- operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, check finiteness, and record it on the tape if needed."""
    if _narrow:
        with np.errstate(over="ignore"):
            data = data.astype(np.float16).astype(DTYPE)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by a forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.node = Node(tuple(parents), backward)
    return out


def backward(loss: Tensor) -> dict:
    """Reverse-mode pass from a scalar ``loss``.

    Gradients are added into ``.grad`` of every requires-grad leaf and also
    returned as ``{leaf: ndarray}``.  The tape is freed afterwards, so a second
    call on the same graph raises ``GraphError``.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from any tensor that requires grad")
    if loss.node is None:
        leaf_grad = np.ones_like(loss.data)
        loss.grad = leaf_grad if loss.grad is None else loss.grad + leaf_grad
        return {loss: leaf_grad}
    if loss.node.freed:
        raise GraphError("graph already consumed by a previous backward call")

    # collect reachable interior tensors
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None:
            if t.node.freed:
                raise GraphError("graph already consumed by a previous backward call")
            order.append(t)
            stack.extend(p for p in t.node.parents if p.requires_grad)
    order.sort(key=lambda t: t.node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for t in order:
        g = grads.pop(id(t), None)
        node = t.node
        if g is not None:
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p.node is None:
                    leaves[key] = p
        node.freed = True
        node.backward = None
        node.parents = ()

    result = {}
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation (the GPT-2 form)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[idx], dtype=DTYPE)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient rows are scattered back in id order."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(-1, table.shape[1])
        for i, row in zip(flat_ids, flat_g):
            full[i] += row
        return (full,)

    return _make(out, (table,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, bw)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data
    for ax in reversed(axes):
        out = tree_sum(out, ax, keepdims=True)
    kept_shape = out.shape
    if not keepdims:
        out = out.reshape([n for i, n in enumerate(a.shape) if i not in axes])

    def bw(g):
        return (np.broadcast_to(g.reshape(kept_shape), a.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast.

    Gradient: da = g @ b^T, db = a^T @ g (reduced over broadcast batch axes).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = seq_matmul(a.data, b.data)

    def bw(g):
        ga = seq_matmul(g, np.swapaxes(b.data, -1, -2))
        gb = seq_matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax.  ``mask`` (bool, broadcastable) marks allowed
    entries; forbidden entries get probability exactly zero."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    if mask is None:
        shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax row with every position masked")
        filled = np.where(mask, x.data, -np.inf)
        shifted = filled - np.max(filled, axis=axis, keepdims=True)
        e = np.exp(shifted)
    out = e / tree_sum(e, axis, keepdims=True)

    def bw(g):
        dot = tree_sum(g * out, axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(tree_sum(np.exp(shifted), axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * tree_sum(g, axis, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit (biased) variance, then
    apply ``gain`` and ``bias``."""
    if eps < 0:
        raise ValueError("layer_norm eps must be non-negative")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = mean(x, -1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), -1, keepdims=True)
    xhat = div(xc, sqrt(add(var, eps)))
    return add(mul(xhat, gain), bias)


# ---------------------------------------------------------------------------
# vision ops


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a [C_in, H, W] map with [C_out, C_in, kh, kw] kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] and [O,C,kh,kw], got {x.shape}, {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output extent < 1 for input {x.shape} and kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernels.data.reshape(c_out, -1)
    out = seq_matmul(wmat, cols).reshape(c_out, ho, wo)

    def bw(g):
        gm = g.reshape(c_out, ho * wo)
        gw = seq_matmul(gm, cols.T).reshape(kernels.shape)
        gcols = seq_matmul(wmat.T, gm).reshape(c_in, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw

    return _make(out, (x, kernels), bw)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 1:
        raise DimensionError(f"global_avg_pool expects [C,H,W], got {x.shape}")
    return mean(reshape(x, (x.shape[0], -1)), -1)


# ---------------------------------------------------------------------------
# losses / checks


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Summed negative log-likelihood of integer ``targets`` under ``logits``
    (last axis = classes), optionally weighted per position (0 drops it)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits, -1)
    v = logits.shape[-1]
    onehot = np.zeros(lp.shape, dtype=DTYPE)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    if weights is not None:
        onehot = onehot * np.asarray(weights, dtype=DTYPE)[..., None]
    picked = mul(lp, onehot)
    return mul(sum_(reshape(picked, (-1, v))), -1.0)


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5,
               coords: Optional[Iterable[int]] = None) -> float:
    """Max relative error between autodiff and central differences.

    Error per coordinate is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    xt = Tensor(base, requires_grad=True)
    out = f(xt)
    backward(out)
    g_ad = xt.grad if xt.grad is not None else np.zeros_like(base)
    flat = base.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(base)).item()
        flat[i] = orig - step
        fm = f(Tensor(base)).item()
        flat[i] = orig
        g_fd = (fp - fm) / (2 * step)
        ga = g_ad.reshape(-1)[i]
        err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), 1e-8)
        worst = max(worst, err)
    return worst
