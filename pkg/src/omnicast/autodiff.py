"""A small reverse-mode automatic differentiation engine on numpy arrays.

Only the operations the forecaster needs are provided. Each operation
returns a :class:`Tensor` that remembers its parents and a closure
propagating the output gradient back to them; :meth:`Tensor.backward`
walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (values are unchanged)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() on a non-scalar needs an explicit gradient")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed once propagated
                    node.grad = None

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def _unary(x: Tensor, value: np.ndarray, dvalue: Callable[[], np.ndarray]) -> Tensor:
    def back(g):
        x._accumulate(g * dvalue())

    return _make(value, (x,), back)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _unary(x, s, lambda: s * (1.0 - s))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _unary(x, t, lambda: 1.0 - t * t)


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _unary(x, x.data * s, lambda: s * (1.0 + x.data * (1.0 - s)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.maximum(x.data, 0.0), lambda: (x.data > 0).astype(x.data.dtype))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    value = np.logaddexp(0.0, x.data)
    return _unary(x, value, lambda: 0.5 * (np.tanh(0.5 * x.data) + 1.0))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.data * x.data, lambda: 2.0 * x.data)


# -- reductions and shape ----------------------------------------------------

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def back(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), back)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)

    def back(g):
        x._accumulate(np.transpose(g, inverse))

    return _make(np.transpose(x.data, axes), (x,), back)


def concat(xs: Sequence, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                x._accumulate(g[tuple(idx)])

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, back)


def take(x, index, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        idx = [slice(None)] * x.data.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        x._accumulate(full)

    return _make(np.take(x.data, index, axis=axis), (x,), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


def linear(x, w, b=None) -> Tensor:
    """x (N, I) @ w (I, O) + b (O,)."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    value = shifted - lse
    soft = np.exp(value)

    def back(g):
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(value, (x,), back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), back)


# -- convolutions ------------------------------------------------------------

def _tuple(v, d):
    return tuple(v) if np.ndim(v) else (int(v),) * d


def im2col(x: np.ndarray, kernel, stride, padding) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Patches of a (N, C, *S) array as rows of a (N*prod(O), C*prod(k)) matrix."""
    d = len(kernel)
    pad = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x, pad) if any(padding) else x
    spatial = tuple(range(2, 2 + d))
    win = sliding_window_view(xp, kernel, axis=spatial)
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    out_shape = win.shape[2:2 + d]
    n, c = x.shape[:2]
    order = (0,) + tuple(range(2, 2 + d)) + (1,) + tuple(range(2 + d, 2 + 2 * d))
    cols = np.ascontiguousarray(win.transpose(order)).reshape(n * int(np.prod(out_shape)), -1)
    return cols, out_shape


def col2im(cols: np.ndarray, x_shape, kernel, stride, padding, out_shape) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back into a (N, C, *S) array."""
    d = len(kernel)
    n, c = x_shape[:2]
    padded = tuple(s + 2 * p for s, p in zip(x_shape[2:], padding))
    patches = cols.reshape((n,) + tuple(out_shape) + (c,) + tuple(kernel))
    # -> (N, C, *k, *O)
    order = (0, 1 + d) + tuple(range(2 + d, 2 + 2 * d)) + tuple(range(1, 1 + d))
    patches = patches.transpose(order)
    acc = np.zeros((n, c) + padded, dtype=cols.dtype)
    for offset in np.ndindex(*kernel):
        region = tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offset, stride, out_shape))
        acc[(slice(None), slice(None)) + region] += patches[(slice(None), slice(None)) + offset]
    crop = tuple(slice(p, p + s) for p, s in zip(padding, x_shape[2:]))
    return acc[(slice(None), slice(None)) + crop]


def conv(x, w, b=None, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation: x (N, C, *S), w (O, C, *k), b (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    d = w.data.ndim - 2
    kernel = w.shape[2:]
    stride = _tuple(stride, d)
    padding = _tuple(padding, d)
    cols, out_shape = im2col(x.data, kernel, stride, padding)
    w_mat = w.data.reshape(w.shape[0], -1)
    out = cols @ w_mat.T
    n = x.shape[0]
    value = np.moveaxis(out.reshape((n,) + tuple(out_shape) + (w.shape[0],)), -1, 1)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        value = value + b.data.reshape((1, -1) + (1,) * d)
        parents.append(b)

    def back(g):
        g_mat = np.moveaxis(g, 1, -1).reshape(-1, w.shape[0])
        if w.requires_grad:
            w._accumulate((g_mat.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g_mat.sum(axis=0))
        if x.requires_grad:
            x._accumulate(col2im(g_mat @ w_mat, x.shape, kernel, stride, padding, out_shape))

    return _make(value, parents, back)


def conv_transpose(x, w, b=None, stride=1, padding=0, output_padding=0) -> Tensor:
    """N-d transposed convolution: x (N, Cin, *I), w (Cin, Cout, *k), b (Cout,).

    Output size per axis is ``(I - 1) * stride - 2 * padding + k + output_padding``.
    """
    x, w = as_tensor(x), as_tensor(w)
    d = w.data.ndim - 2
    kernel = w.shape[2:]
    stride = _tuple(stride, d)
    padding = _tuple(padding, d)
    output_padding = _tuple(output_padding, d)
    n, cin = x.shape[:2]
    cout = w.shape[1]
    in_shape = x.shape[2:]
    out_spatial = tuple((i - 1) * s - 2 * p + k + op
                        for i, s, p, k, op in zip(in_shape, stride, padding, kernel, output_padding))
    x_mat = np.moveaxis(x.data, 1, -1).reshape(-1, cin)
    w_mat = w.data.reshape(cin, -1)
    cols = x_mat @ w_mat
    value = col2im(cols, (n, cout) + out_spatial, kernel, stride, padding, in_shape)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        value = value + b.data.reshape((1, -1) + (1,) * d)
        parents.append(b)

    def back(g):
        gcols, got = im2col(g, kernel, stride, padding)
        if tuple(got) != tuple(in_shape):
            gcols = _crop_cols(g, kernel, stride, padding, in_shape)
        if w.requires_grad:
            w._accumulate((x_mat.T @ gcols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0,) + tuple(range(2, 2 + d))))
        if x.requires_grad:
            dx = (gcols @ w_mat.T).reshape((n,) + tuple(in_shape) + (cin,))
            x._accumulate(np.moveaxis(dx, -1, 1))

    return _make(value, parents, back)


def _crop_cols(g, kernel, stride, padding, in_shape):
    cols, got = im2col(g, kernel, stride, padding)
    n = g.shape[0]
    full = cols.reshape((n,) + tuple(got) + (-1,))
    idx = (slice(None),) + tuple(slice(0, m) for m in in_shape)
    return np.ascontiguousarray(full[idx]).reshape(n * int(np.prod(in_shape)), -1)


def conv2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    if as_tensor(w).data.ndim != 4:
        raise ValueError("conv2d expects a (O, C, kh, kw) kernel")
    return conv(x, w, b, stride, padding)


def conv3d(x, w, b=None, stride=1, padding=0) -> Tensor:
    if as_tensor(w).data.ndim != 5:
        raise ValueError("conv3d expects a (O, C, kt, kh, kw) kernel")
    return conv(x, w, b, stride, padding)


def conv_transpose2d(x, w, b=None, stride=1, padding=0, output_padding=0) -> Tensor:
    if as_tensor(w).data.ndim != 4:
        raise ValueError("conv_transpose2d expects a (Cin, Cout, kh, kw) kernel")
    return conv_transpose(x, w, b, stride, padding, output_padding)
