"""Dense tensors with a reverse-mode tape.

Every op takes :class:`Tensor` (or array-like) inputs, computes its result with
numpy and, when any input requires a gradient, records a closure that maps the
output gradient to the input gradients. ``Tensor.backward`` replays the tape in
reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    # subgradient at 0 is 0
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _result(out, (a,), lambda g: (g * (out > 0),))


def identity(a) -> Tensor:
    return as_tensor(a)


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def take(a, indices, axis: int) -> Tensor:
    """Select entries of ``a`` along ``axis`` (indices may repeat)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim

    def back(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        moved = np.moveaxis(ga, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (ga,)

    return _result(np.take(a.data, idx, axis=ax), (a,), back)


def gather_rows(a, idx) -> Tensor:
    """``out[b, j] = a[b, idx[b, j]]`` for ``a`` of shape ``[B, m, ...]``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])[:, None]

    def back(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _result(a.data[rows, idx], (a,), back)


def scatter_rows(v, idx, m: int) -> Tensor:
    """Adjoint of :func:`gather_rows`: sum rows of ``v`` into ``m`` positions."""
    v = as_tensor(v)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(v.shape[0])[:, None]
    out = np.zeros((v.shape[0], m) + v.shape[2:], dtype=DTYPE)
    np.add.at(out, (rows, idx), v.data)
    return _result(out, (v,), lambda g: (g[rows, idx],))


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len(ts) == 1:
        return ts[0]
    ax = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the two spatial axes of an ``[..., h, w, c]`` tensor."""
    a = as_tensor(a)
    if pad == 0:
        return a
    widths = [(0, 0)] * a.ndim
    widths[-3] = widths[-2] = (pad, pad)
    sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad), slice(None))
    return _result(np.pad(a.data, widths), (a,), lambda g: (g[sl],))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result((a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],)), (a, b), back2)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), back)


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """Valid-padding 2-D convolution (cross-correlation).

    ``x`` is ``[h, w, c_in]`` or ``[B, h, w, c_in]``; ``kernels`` is
    ``[k, k, c_in, c_out]``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if kernels.ndim != 4 or x.ndim not in (3, 4) or x.shape[-1] != kernels.shape[2]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernels {kernels.shape}")
    k = kernels.shape[0]
    h, w = x.shape[-3], x.shape[-2]
    if k > h or k > w:
        raise ValueError(f"kernel {k}x{k} larger than input {h}x{w}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    win = sliding_window_view(xd, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # win: [B, H', W', c_in, k, k]
    K = kernels.data
    out = np.tensordot(win, K, axes=([4, 5, 3], [0, 1, 2]))
    ho, wo = out.shape[1], out.shape[2]

    def back(g):
        gb = g[None] if single else g
        gk = None
        if kernels.requires_grad:
            gk = np.tensordot(win, gb, axes=([0, 1, 2], [0, 1, 2]))  # [c_in, k, k, c_out]
            gk = np.transpose(gk, (1, 2, 0, 3))
        gx = None
        if x.requires_grad:
            gx = np.zeros(xd.shape, dtype=DTYPE)
            span_h = stride * (ho - 1) + 1
            span_w = stride * (wo - 1) + 1
            for u in range(k):
                for v in range(k):
                    gx[:, u : u + span_h : stride, v : v + span_w : stride, :] += gb @ K[u, v].T
            if single:
                gx = gx[0]
        return gx, gk

    return _result(out[0] if single else out, (x, kernels), back)


# ---------------------------------------------------------------- normalisers


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    y = _softmax_np(x.data, axis)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)
    return _result(out, (x,), lambda g: (g - y * g.sum(axis=axis, keepdims=True),))


def top_k(x, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries of a vector, largest first.

    Ties go to the lowest index.
    """
    v = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=DTYPE).ravel()
    if not 1 <= k <= v.size:
        raise ValueError(f"top_k needs 1 <= k <= {v.size}, got k={k}")
    return np.argsort(-v, kind="stable")[:k]
