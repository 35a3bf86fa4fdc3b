"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure; ops build a tape
and `backward()` walks it in reverse topological order. Dtype is preserved
end to end, so the same graph runs in float32 for training and float64 for
finite-difference checks. Heavy ops (conv, correlation, warp) dispatch through
`kernels`; everything else is plain numpy.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (evaluation, diagnostics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def astensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _topo_order(root: Tensor):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    # accumulation rebinds, never mutates in place, so aliasing is safe
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _make(data, parents, bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _coerce(a, b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = _coerce(a, b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = _coerce(a, b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = _coerce(a, b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd)


def neg(a):
    def bwd(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bwd)


def pow_scalar(a, p: float):
    data = a.data**p

    def bwd(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return _make(data, (a,), bwd)


def abs_(a):
    data = np.abs(a.data)

    def bwd(g):
        _accumulate(a, g * np.sign(a.data))

    return _make(data, (a,), bwd)


def exp(a):
    data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * data)

    return _make(data, (a,), bwd)


def log(a):
    data = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _make(data, (a,), bwd)


def sqrt(a):
    data = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g / (2.0 * data))

    return _make(data, (a,), bwd)


def clip(a, lo: float, hi: float):
    """Clamp with pass-through gradient on the closed interval [lo, hi]."""
    data = np.clip(a.data, lo, hi)

    def bwd(g):
        inside = (a.data >= lo) & (a.data <= hi)
        _accumulate(a, g * inside)

    return _make(data, (a,), bwd)


def relu(a):
    data = np.maximum(a.data, 0)

    def bwd(g):
        _accumulate(a, g * (a.data > 0))

    return _make(data, (a,), bwd)


def leaky_relu(a, slope: float = 0.1):
    data = np.where(a.data > 0, a.data, a.data * slope)

    def bwd(g):
        _accumulate(a, g * np.where(a.data > 0, 1.0, slope).astype(a.data.dtype))

    return _make(data, (a,), bwd)


def softplus(a):
    data = np.logaddexp(0.0, a.data).astype(a.data.dtype)

    def bwd(g):
        _accumulate(a, g * sigmoid_np(a.data))

    return _make(data, (a,), bwd)


def sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a):
    data = sigmoid_np(a.data)

    def bwd(g):
        _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def bce_with_logits(logits: Tensor, targets: np.ndarray):
    """Per-element binary cross entropy, numerically stable in the logits."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    data = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bwd(g):
        _accumulate(logits, g * (sigmoid_np(z) - t))

    return _make(data, (logits,), bwd)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data, requires_grad=False)


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(ge, a.data.shape).astype(a.data.dtype, copy=True))

    return _make(data, (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    data = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(data, (a,), bwd)


def concat(tensors, axis=1):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                _accumulate(t, np.ascontiguousarray(p))

    return _make(data, tuple(tensors), bwd)


# ---------------------------------------------------------------- structured


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    data = kernels.conv2d_forward(x.data, w.data, b.data, stride, pad)
    h, wd = x.data.shape[2], x.data.shape[3]
    kh, kw = w.data.shape[2], w.data.shape[3]

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accumulate(x, kernels.conv2d_bwd_input(g, w.data, stride, pad, h, wd))
        if w.requires_grad or b.requires_grad:
            gw, gb = kernels.conv2d_bwd_weight(x.data, g, stride, pad, kh, kw)
            if w.requires_grad:
                _accumulate(w, gw)
            if b.requires_grad:
                _accumulate(b, gb)

    return _make(data, (x, w, b), bwd)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed conv; weight layout (c_in, c_out, kh, kw).

    Output spatial size is (in - 1)*stride - 2*pad + k. Forward is the adjoint
    of conv2d, so the three kernels are reused with roles swapped.
    """
    kh, kw = w.data.shape[2], w.data.shape[3]
    ho = (x.data.shape[2] - 1) * stride - 2 * pad + kh
    wo = (x.data.shape[3] - 1) * stride - 2 * pad + kw
    data = kernels.conv2d_bwd_input(x.data, w.data, stride, pad, ho, wo)
    data = data + b.data[None, :, None, None]

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            zero_b = np.zeros(x.data.shape[1], dtype=g.dtype)
            _accumulate(x, kernels.conv2d_forward(g, w.data, zero_b, stride, pad))
        if w.requires_grad:
            gw, _ = kernels.conv2d_bwd_weight(g, x.data, stride, pad, kh, kw)
            _accumulate(w, gw)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    return _make(data, (x, w, b), bwd)


def correlate1d(left: Tensor, right: Tensor, max_disp: int) -> Tensor:
    """Mean-over-channel dot products for horizontal shifts d in [0, max_disp].

    Shifts look leftward into `right` only; positions with x - d < 0 are zero.
    """
    data = kernels.corr1d_forward(left.data, right.data, max_disp)

    def bwd(g):
        gl, gr = kernels.corr1d_backward(left.data, right.data, np.ascontiguousarray(g))
        if left.requires_grad:
            _accumulate(left, gl)
        if right.requires_grad:
            _accumulate(right, gr)

    return _make(data, (left, right), bwd)


def warp_horizontal(src: Tensor, disp: Tensor):
    """Sample src at (x - d, y), bilinear along x.

    Returns (warped Tensor, in-bounds bool mask). Out-of-bounds outputs are 0
    and carry no gradient; the mask is a plain array, no gradient flows
    through it.
    """
    d = disp.data.astype(src.data.dtype, copy=False)
    data, inb = kernels.warp1d_forward(src.data, d)

    def bwd(g):
        gsrc, gdisp = kernels.warp1d_backward(src.data, d, g)
        if src.requires_grad:
            _accumulate(src, gsrc)
        if disp.requires_grad:
            _accumulate(disp, gdisp.astype(disp.data.dtype, copy=False))

    return _make(data, (src, disp), bwd), inb


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int):
    """Bilinear interpolation matrix, half-pixel centers, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        s = (i + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        f = s - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Value-preserving bilinear resize of the last two axes."""
    h, w = x.data.shape[-2], x.data.shape[-1]
    ry = _interp_matrix(h, out_h).astype(x.data.dtype)
    cx = _interp_matrix(w, out_w).astype(x.data.dtype)
    data = _apply_sep(x.data, ry, cx)

    def bwd(g):
        _accumulate(x, _apply_sep(g, ry.T, cx.T))

    return _make(data, (x,), bwd)


def _apply_sep(arr, ry, cx):
    t = np.tensordot(arr, ry, axes=([arr.ndim - 2], [1]))  # ..., w, oh
    t = np.tensordot(t, cx, axes=([arr.ndim - 2], [1]))  # ..., oh, ow
    return np.ascontiguousarray(t)


@lru_cache(maxsize=None)
def nn_indices(n_in: int, n_out: int):
    """Nearest source index per target cell, half-pixel centers.

    Exact .5 ties round toward the larger index.
    """
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    idx = np.floor(pos + 0.5).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def nn_downsample(x: Tensor, out_h: int, out_w: int, value_scale: float = 1.0) -> Tensor:
    """Nearest-neighbor resample of the last two axes, values multiplied by
    value_scale (the width ratio when resampling disparities)."""
    h, w = x.data.shape[-2], x.data.shape[-1]
    iy = nn_indices(h, out_h)
    ix = nn_indices(w, out_w)
    data = x.data[..., iy[:, None], ix[None, :]]
    if value_scale != 1.0:
        data = data * np.asarray(value_scale, dtype=x.data.dtype)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (Ellipsis, iy[:, None], ix[None, :]), g)
        if value_scale != 1.0:
            gx *= np.asarray(value_scale, dtype=x.data.dtype)
        _accumulate(x, gx)

    return _make(np.ascontiguousarray(data), (x,), bwd)


def box3(x: Tensor) -> Tensor:
    """3x3 box mean over the last two axes with 1px reflect padding
    (same-size output); the SSIM local-statistics filter."""
    data = _box3_np(x.data)

    def bwd(g):
        _accumulate(x, _box3_adjoint_np(g))

    return _make(data, (x,), bwd)


def _box3_np(a):
    pw = [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)]
    ap = np.pad(a, pw, mode="reflect")
    h, w = a.shape[-2], a.shape[-1]
    out = np.zeros_like(a)
    for dy in range(3):
        for dx in range(3):
            out += ap[..., dy : dy + h, dx : dx + w]
    out *= np.asarray(1.0 / 9.0, dtype=a.dtype)
    return out


def _box3_adjoint_np(g):
    h, w = g.shape[-2], g.shape[-1]
    gp = np.zeros(g.shape[:-2] + (h + 2, w + 2), dtype=g.dtype)
    gn = g * np.asarray(1.0 / 9.0, dtype=g.dtype)
    for dy in range(3):
        for dx in range(3):
            gp[..., dy : dy + h, dx : dx + w] += gn
    out = np.ascontiguousarray(gp[..., 1 : h + 1, 1 : w + 1])
    # fold the reflected border back onto its source rows/cols
    out[..., 1, :] += gp[..., 0, 1 : w + 1]
    out[..., h - 2, :] += gp[..., h + 1, 1 : w + 1]
    out[..., :, 1] += gp[..., 1 : h + 1, 0]
    out[..., :, w - 2] += gp[..., 1 : h + 1, w + 1]
    out[..., 1, 1] += gp[..., 0, 0]
    out[..., 1, w - 2] += gp[..., 0, w + 1]
    out[..., h - 2, 1] += gp[..., h + 1, 0]
    out[..., h - 2, w - 2] += gp[..., h + 1, w + 1]
    return out
