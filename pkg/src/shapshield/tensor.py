"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray. Operations record a tape entry only when an
operand is gradient-tracked, so inference pays no bookkeeping cost.
``backward(loss)`` runs one reverse sweep over the tape of a scalar loss
and populates ``.grad`` on every tracked tensor reachable from it.
Gradients accumulate across backward calls until cleared.

All computation is in 64-bit floats.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "backward"]


class Tensor:
    """Dense n-dimensional float64 array with optional gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic -----------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _from_op(data, parents, grad_fn):
    """Build an op result; the tape edge exists only if a parent is tracked."""
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 \
        else np.asarray(data, dtype=np.float64)
    track = any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.grad = None
    out._parents = tuple(parents) if track else ()
    out._grad_fn = grad_fn if track else None
    return out


def _as_pair(a, b):
    """Coerce one possibly-constant operand pair to (Tensor|const, ndarray)."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _as_pair(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    a, b = _as_pair(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _from_op(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    a, b = _as_pair(a, b)

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _from_op(a.data * b.data, (a, b), grad_fn)


def div(a, b):
    a, b = _as_pair(a, b)

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _from_op(a.data / b.data, (a, b), grad_fn)


def power(a, p: float):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    p = float(p)

    def grad_fn(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _from_op(np.power(a.data, p), (a,), grad_fn)


def square(a):
    return power(a, 2.0)


def relu(a):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _from_op(np.where(mask, a.data, 0.0), (a,), grad_fn)


def sigmoid(a):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    # stable logistic: exp never sees a large positive argument
    z = a.data
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _from_op(out, (a,), grad_fn)


def tanh(a):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _from_op(out, (a,), grad_fn)


def exp(a):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _from_op(out, (a,), grad_fn)


def log(a):
    if not isinstance(a, Tensor):
        a = Tensor(a)

    def grad_fn(g):
        return (g / a.data,)

    return _from_op(np.log(a.data), (a,), grad_fn)


def clamp_min(a, floor: float):
    """Elementwise max(a, floor); at the tie the gradient routes to the floor."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    mask = a.data > floor

    def grad_fn(g):
        return (g * mask,)

    return _from_op(np.where(mask, a.data, floor), (a,), grad_fn)


# reductions and shape ------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, a.data.ndim)

    def grad_fn(g):
        gg = np.asarray(g)
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, a.data.shape),)

    return _from_op(out, (a,), grad_fn)


def tensor_mean(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    old = a.data.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _from_op(a.data.reshape(shape), (a,), grad_fn)


def matmul(a, b):
    a, b = _as_pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(a.data @ b.data, (a, b), grad_fn)


def linear(x, weight, bias):
    """Affine map x @ W.T + b with W shaped (out, in)."""
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ValueError(
            f"dense layer: input shape {xd.shape} incompatible with weight "
            f"{wd.shape} (expected (*, {wd.shape[1]}))")

    def grad_fn(g):
        return (g @ wd if x.requires_grad else None,
                g.T @ xd if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return _from_op(xd @ wd.T + bd, (x, weight, bias), grad_fn)


# spatial ops ---------------------------------------------------------------

def conv2d(x, weight, bias, stride: int = 1):
    """Cross-correlation of (n,c,h,w) input with (oc,c,kh,kw) kernels, no padding."""
    xd, wd = x.data, weight.data
    n, c, h, w = xd.shape
    oc, ic, kh, kw = wd.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    k = c * kh * kw
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                     # (n,c,oh,ow,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, k)
    wflat = wd.reshape(oc, k)
    out = cols @ wflat.T                                    # (n*oh*ow, oc)
    out = out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def grad_fn(g):
        gp = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
        g_w = (gp.T @ cols).reshape(oc, ic, kh, kw) if weight.requires_grad else None
        g_b = gp.sum(axis=0) if bias.requires_grad else None
        g_x = None
        if x.requires_grad:
            gcols = (gp @ wflat).reshape(n, oh, ow, c, kh, kw)
            g_x = np.zeros((n, c, h, w))
            for di in range(kh):
                for dj in range(kw):
                    g_x[:, :, di:di + (oh - 1) * stride + 1:stride,
                        dj:dj + (ow - 1) * stride + 1:stride] += \
                        gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return g_x, g_w, g_b

    return _from_op(np.ascontiguousarray(out), (x, weight, bias), grad_fn)


def maxpool2d(x, kernel: int, stride: int | None = None):
    """Max pooling; on ties the gradient routes to the first maximal element
    in row-major window order."""
    stride = kernel if stride is None else stride
    xd = x.data
    n, c, h, w = xd.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    # scan window elements in row-major order; strict > keeps the first max
    out = np.full((n, c, oh, ow), -np.inf)
    choice = np.zeros((n, c, oh, ow), dtype=np.int8)
    for di in range(kernel):
        for dj in range(kernel):
            cand = xd[:, :, di:di + (oh - 1) * stride + 1:stride,
                      dj:dj + (ow - 1) * stride + 1:stride]
            better = cand > out
            out = np.where(better, cand, out)
            choice[better] = di * kernel + dj

    def grad_fn(g):
        g_x = np.zeros((n, c, h, w))
        for di in range(kernel):
            for dj in range(kernel):
                g_x[:, :, di:di + (oh - 1) * stride + 1:stride,
                    dj:dj + (ow - 1) * stride + 1:stride] += \
                    g * (choice == di * kernel + dj)
        return (g_x,)

    return _from_op(out, (x,), grad_fn)


# backward sweep ------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; accumulates into ``.grad`` of every
    tracked tensor reachable from it."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._grad_fn is None:
        raise ValueError("backward: the loss has no recorded operations")

    topo: list[Tensor] = []
    seen = {id(loss)}
    stack: list[tuple[Tensor, object]] = [(loss, iter(loss._parents))]
    while stack:
        node, it = stack[-1]
        child = None
        for p in it:
            if id(p) not in seen and p.requires_grad:
                child = p
                break
        if child is None:
            topo.append(node)
            stack.pop()
        else:
            seen.add(id(child))
            stack.append((child, iter(child._parents)))

    buf: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = buf.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            buf[pid] = pg if pid not in buf else buf[pid] + pg
