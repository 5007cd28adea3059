#!/usr/bin/env python3
"""
TENSOR ENGINE
=============

Dense numpy tensors with reverse-mode automatic differentiation.

Every op computes its forward value eagerly and, when gradients are being
recorded, attaches a closure mapping the output gradient to one gradient per
parent. Tensor.backward() walks the recorded graph in reverse topological
order and accumulates into the `.grad` of leaf tensors.

Conventions:
    - Layout is NCHW for images, (batch, features) for vectors.
    - Convolution padding is SAME: output size = ceil(input / stride).
    - fp32 for training, fp64 for gradient checks.
    - Recording is thread-local: one evaluation context per thread.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable gradient recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


# ============================================================================
# TENSOR
# ============================================================================

class Tensor:
    """
    N-D array node of the autodiff graph.

    Attributes:
        data: ndarray holding the value (never mutated by ops)
        requires_grad: whether gradients flow into this tensor
        grad: accumulated gradient (leaf tensors only)
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable] = None,
        name: Optional[str] = None,
    ):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # Operator sugar -------------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return pow_(self, exponent)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)

    # Reverse sweep --------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


class Parameter(Tensor):
    """Learnable leaf tensor"""

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)


def _topological_order(root: Tensor) -> List[Tensor]:
    # iterative DFS: decoder graphs are deeper than the recursion limit
    order: List[Tensor] = []
    visited = set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value)
    if like is not None and (not np.issubdtype(array.dtype, np.floating) or array.ndim == 0):
        array = array.astype(like.dtype)
    return Tensor(array)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ============================================================================
# ELEMENTWISE
# ============================================================================

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def pow_(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent
    return _result(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1 - out * out),))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient is zero where the clamp is active."""
    mask = (x.data >= low) & (x.data <= high)
    return _result(np.clip(x.data, low, high), (x,), lambda g: (g * mask,))


def minimum(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    take_a = a.data <= b.data
    return _result(np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    take_a = a.data >= b.data
    return _result(np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = np.exp(x.data - logsumexp(x.data, axis=axis, keepdims=True))

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = x.data - logsumexp(x.data, axis=axis, keepdims=True)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _result(out, (x,), backward)


# ============================================================================
# REDUCTIONS AND SHAPE
# ============================================================================

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _result(out, (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size / max(out.size, 1)
    return _result(out, (x,), lambda g: (_expand_reduced(g / count, x.shape, axis, keepdims).copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice [start, stop) along one axis."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)
    return _result(x.data[index], (x,), backward)


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0."""
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, indices, g)
        return (full,)
    return _result(x.data[indices], (x,), backward)


def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(a.data @ b.data, (a, b), backward)


# ============================================================================
# CONVOLUTION
# ============================================================================

def same_padding(size: int, kernel: int, stride: int, dilation: int) -> Tuple[int, int, int]:
    """Return (output size, pad before, pad after) for SAME padding."""
    out = -(-size // stride)
    extent = (kernel - 1) * dilation + 1
    total = max((out - 1) * stride + extent - size, 0)
    return out, total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            cols[:, :, i, j] = xp[:, :, hs:hs + stride * (oh - 1) + 1:stride,
                                  ws:ws + stride * (ow - 1) + 1:stride]
    return cols


def _col2im(dcols: np.ndarray, padded_shape, stride: int, dilation: int) -> np.ndarray:
    kh, kw, oh, ow = dcols.shape[2:]
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            dxp[:, :, hs:hs + stride * (oh - 1) + 1:stride,
                ws:ws + stride * (ow - 1) + 1:stride] += dcols[:, :, i, j]
    return dxp


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """
    Cross-correlation with SAME padding.

    Args:
        x: (N, C, H, W) input
        w: (O, C/groups, kh, kw) kernel
        b: optional (O,) bias
    """
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups or cg != c // groups:
        raise ShapeError(f"conv2d: input channels {c}, kernel {w.shape}, groups {groups} are inconsistent")
    if min(h, wd) == 0 or min(kh, kw) == 0:
        raise ShapeError(f"conv2d: zero-sized dimension in input {x.shape} or kernel {w.shape}")

    oh, pt, pb = same_padding(h, kh, stride, dilation)
    ow, pl, pr = same_padding(wd, kw, stride, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    k = cg * kh * kw
    cols_g = cols.reshape(n, groups, k, oh * ow)
    w_g = w.data.reshape(groups, o // groups, k)
    out = np.matmul(w_g[None], cols_g).reshape(n, o, oh, ow)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)

    def backward(g):
        g_g = g.reshape(n, groups, o // groups, oh * ow)
        dw = np.matmul(g_g, np.swapaxes(cols_g, -1, -2)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(np.swapaxes(w_g, -1, -2)[None], g_g).reshape(cols.shape)
        dxp = _col2im(dcols, xp.shape, stride, dilation)
        dx = dxp[:, :, pt:pt + h, pl:pl + wd]
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, backward)


def _bilinear_corners(py: np.ndarray, px: np.ndarray, height: int, width: int):
    """Yield (y, x, weight, valid) for the four bilinear corners."""
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    for dy, dx, weight in ((0, 0, (1 - ly) * (1 - lx)), (0, 1, (1 - ly) * lx),
                           (1, 0, ly * (1 - lx)), (1, 1, ly * lx)):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < height) & (xi >= 0) & (xi < width)
        yield np.clip(yi, 0, height - 1), np.clip(xi, 0, width - 1), weight, valid


def deform_conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor],
    offsets: Tensor,
    dilation: int = 1,
) -> Tensor:
    """
    Deformable convolution (v1, no modulation), stride 1, SAME padding.

    Tap k samples x at (base_k + offset_k) by bilinear interpolation with zero
    padding outside the image. offsets has 2*kh*kw channels ordered
    (dy_0, dx_0, dy_1, dx_1, ...).
    """
    n, c, h, wd = x.shape
    o, cin, kh, kw = w.shape
    taps = kh * kw
    if cin != c:
        raise ShapeError(f"deform_conv2d: kernel expects {cin} channels, input has {c}")
    if offsets.shape != (n, 2 * taps, h, wd):
        raise ShapeError(f"deform_conv2d: offsets must have shape {(n, 2 * taps, h, wd)}, got {offsets.shape}")

    _, pt, _ = same_padding(h, kh, 1, dilation)
    _, pl, _ = same_padding(wd, kw, 1, dilation)
    ki, kj = np.divmod(np.arange(taps), kw)
    base_y = (np.arange(h)[None, :, None] - pt + ki[:, None, None] * dilation).astype(x.dtype)
    base_x = (np.arange(wd)[None, None, :] - pl + kj[:, None, None] * dilation).astype(x.dtype)
    off = offsets.data.reshape(n, taps, 2, h, wd)
    py = base_y[None] + off[:, :, 0]
    px = base_x[None] + off[:, :, 1]

    x_last = x.data.transpose(0, 2, 3, 1)  # (N, H, W, C)
    n_idx = np.arange(n)[:, None, None, None]
    corners = []
    sampled = np.zeros((n, taps, h, wd, c), dtype=x.dtype)
    for yi, xi, weight, valid in _bilinear_corners(py, px, h, wd):
        value = x_last[n_idx, yi, xi] * valid[..., None]
        sampled += value * weight[..., None]
        corners.append((yi, xi, weight, valid, value))
    frac_y = py - np.floor(py)
    frac_x = px - np.floor(px)

    cols = sampled.transpose(0, 4, 1, 2, 3).reshape(n, c * taps, h * wd)
    w2 = w.data.reshape(o, c * taps)
    out = np.matmul(w2[None], cols).reshape(n, o, h, wd)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)

    def backward(g):
        g2 = g.reshape(n, o, h * wd)
        dw = np.matmul(g2, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(w2.T[None], g2).reshape(n, c, taps, h, wd).transpose(0, 2, 3, 4, 1)

        dx_last = np.zeros_like(x_last)
        for yi, xi, weight, valid, _ in corners:
            np.add.at(dx_last, (np.broadcast_to(n_idx, yi.shape), yi, xi),
                      dcols * (weight * valid)[..., None])
        v00, v01, v10, v11 = (corner[4] for corner in corners)
        fy = frac_y[..., None]
        fx = frac_x[..., None]
        dval_dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        dval_dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        doff = np.stack([(dcols * dval_dy).sum(-1), (dcols * dval_dx).sum(-1)], axis=2)
        grads = [dx_last.transpose(0, 3, 1, 2), dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        grads.append(doff.reshape(offsets.shape))
        return tuple(grads)

    parents = (x, w, b, offsets) if b is not None else (x, w, offsets)
    return _result(out, parents, backward)


# ============================================================================
# NORMALIZATION
# ============================================================================

def _normalize_backward(dxhat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    return inv_std * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    n, c, h, wd = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xg.var(axis=-1, keepdims=True) + eps)
    xhat_g = (xg - mu) * inv_std
    xhat = xhat_g.reshape(x.shape)
    scale = gamma.data.reshape(1, c, 1, 1)
    out = xhat * scale + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = (g * scale).reshape(n, groups, -1)
        dx = _normalize_backward(dxhat, xhat_g, inv_std, -1).reshape(x.shape)
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    return _result(out, (x, gamma, beta), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Batch normalization over (N, H, W). In training mode the running buffers
    are updated in place; in eval mode they normalize the input.
    """
    c = x.shape[1]
    scale = gamma.data.reshape(1, c, 1, 1)
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        count = x.data.size // c
        if count < 2:
            raise ShapeError("batch_norm: training mode needs more than one value per channel")
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(c) * count / (count - 1)
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * scale + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = g * scale
        dx = _normalize_backward(dxhat, xhat, inv_std, axes) if training else dxhat * inv_std
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    return _result(out, (x, gamma, beta), backward)


# ============================================================================
# RESAMPLING
# ============================================================================

@lru_cache(maxsize=256)
def _interpolation_matrix(size_in: int, size_out: int, dtype_name: str) -> np.ndarray:
    """Half-pixel bilinear weights, shape (size_out, size_in)."""
    matrix = np.zeros((size_out, size_in), dtype=np.float64)
    scale = size_in / size_out
    for j in range(size_out):
        src = min(max((j + 0.5) * scale - 0.5, 0.0), size_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, size_in - 1)
        frac = src - lo
        matrix[j, lo] += 1 - frac
        matrix[j, hi] += frac
    matrix.setflags(write=False)
    return matrix.astype(dtype_name)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize (N, C, H, W) to (N, C, out_h, out_w) with bilinear interpolation."""
    n, c, h, wd = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"bilinear_resize: invalid target size {out_h}x{out_w}")
    if (h, wd) == (out_h, out_w):
        return _result(x.data.copy(), (x,), lambda g: (g,))
    ry = _interpolation_matrix(h, out_h, x.dtype.name)
    rx = _interpolation_matrix(wd, out_w, x.dtype.name)
    out = np.einsum("oh,nchw,pw->ncop", ry, x.data, rx, optimize=True)
    return _result(out, (x,), lambda g: (np.einsum("oh,ncop,pw->nchw", ry, g, rx, optimize=True),))


# ============================================================================
# RECURRENT CELL
# ============================================================================

def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> Tuple[Tensor, Tensor]:
    """
    One LSTM step.

    weight: (input + hidden, 4 * hidden), gate order (input, forget, cell, output)
    """
    hidden = h.shape[-1]
    gates = matmul(concat([x, h], axis=-1), weight) + bias
    i = sigmoid(narrow(gates, -1, 0, hidden))
    f = sigmoid(narrow(gates, -1, hidden, 2 * hidden))
    g = tanh(narrow(gates, -1, 2 * hidden, 3 * hidden))
    o = sigmoid(narrow(gates, -1, 3 * hidden, 4 * hidden))
    c_next = f * c + i * g
    h_next = o * tanh(c_next)
    return h_next, c_next


# ============================================================================
# OPTIMIZATION
# ============================================================================

@dataclass
class AdamState:
    """First/second moment estimates and step counter"""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new arrays; advances state."""
    state.t += 1
    correction1 = 1 - beta1 ** state.t
    correction2 = 1 - beta2 ** state.t
    updated = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        step = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        updated[name] = (value - step).astype(value.dtype)
    return updated


class Adam:
    """Adam over a named set of Parameters"""

    def __init__(self, params: Dict[str, Parameter], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        values = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        updated = adam_step(values, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)
        for name, p in self.params.items():
            p.data = updated[name]


def polyak_update(avg_params: Dict[str, np.ndarray], params: Dict[str, np.ndarray],
                  decay: float) -> Dict[str, np.ndarray]:
    """avg <- decay * avg + (1 - decay) * params"""
    return {name: decay * avg_params[name] + (1 - decay) * params[name] for name in avg_params}


class PolyakAverager:
    """Exponential moving average of parameter values"""

    def __init__(self, params: Dict[str, Parameter], decay: float = 0.9):
        self.params = params
        self.decay = decay
        self.average = {name: p.data.copy() for name, p in params.items()}

    def update(self):
        self.average = polyak_update(self.average, {n: p.data for n, p in self.params.items()}, self.decay)

    def averaged_parameters(self) -> Dict[str, Parameter]:
        return {name: Parameter(value.astype(self.params[name].dtype), name=name)
                for name, value in self.average.items()}


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradient(fn: Callable[..., Tensor], inputs: List[Tensor], step: float = 1e-5,
                   seed: int = 0) -> List[float]:
    """
    Compare analytic gradients of fn(*inputs) against central differences.

    Non-scalar outputs are projected onto a fixed random direction first.
    Returns one relative error per input that requires grad.
    """
    probe_rng = np.random.default_rng(seed)
    out = fn(*inputs)
    projection = probe_rng.standard_normal(out.shape)

    def scalar(*args) -> Tensor:
        return sum_(mul(fn(*args), projection))

    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.zero_grad()
    scalar(*inputs).backward()

    errors = []
    for t in inputs:
        if not t.requires_grad:
            continue
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        with no_grad():
            for idx in range(flat.size):
                original = flat[idx]
                flat[idx] = original + step
                plus = scalar(*inputs).item()
                flat[idx] = original - step
                minus = scalar(*inputs).item()
                flat[idx] = original
                numeric_flat[idx] = (plus - minus) / (2 * step)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors.append(relative_error(analytic, numeric))
    return errors
