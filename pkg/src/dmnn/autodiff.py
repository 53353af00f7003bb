"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations a gated residual network needs are provided. Every op
records a closure that maps the output gradient to one gradient per parent;
``backward`` replays those closures in reverse creation order, which is a
valid reverse topological order because a node is always created after its
inputs.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_seq = itertools.count()
_grad_enabled = True
_mac_counters: list["MacCounter"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending dimension."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate operations executed by conv/linear ops."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _record_macs(n: int) -> None:
    for c in _mac_counters:
        c.add(n)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise and shape ops

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent
    return _make(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index]), (a,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passed unchanged to ``soft``."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: hard shape {hard.shape} != soft shape {soft.shape}")
    return _make(hard, (soft,), lambda g: (g,))


# activations

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (out > 0),))


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6)
    return _make(np.clip(x.data, 0, 6), (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def nll_loss(log_probs: Tensor, target: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the batch for integer class targets."""
    target = np.asarray(target)
    b = log_probs.shape[0]
    if target.shape != (b,):
        raise ShapeError(f"nll_loss: target shape {target.shape}, expected ({b},)")
    rows = np.arange(b)
    lp = log_probs.data
    out = np.asarray(-lp[rows, target].mean(), dtype=lp.dtype)

    def bw(g):
        d = np.zeros_like(lp)
        d[rows, target] = -g / b
        return (d,)

    return _make(out, (log_probs,), bw)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean of ``-sum_j k_j log p_j`` with ``p = softmax(logits)`` and one-hot ``k``."""
    return nll_loss(log_softmax(logits, axis=-1), target)


# dense layers

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear: expected 2-d x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: in_features mismatch, x has {x.shape[1]}, w expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape}, expected ({w.shape[0]},)")
    xd, wd = x.data, w.data
    _record_macs(xd.shape[0] * wd.shape[0] * wd.shape[1])
    out = xd @ wd.T
    if b is None:
        return _make(out, (x, w), lambda g: (g @ wd, g.T @ xd))
    out = out + b.data
    return _make(out, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # [B, C, Ho, Wo, k, k] view
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _col2im(dwin: np.ndarray, xshape, k: int, stride: int, pad: int) -> np.ndarray:
    # dwin: [B, C, Ho, Wo, k, k]
    b, c, h, w = xshape
    ho, wo = dwin.shape[2], dwin.shape[3]
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dwin.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dwin[..., i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Dense 2-d cross-correlation, NCHW input and [C_out, C_in, k, k] weights."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: x must be 4-d [B,C,H,W], got {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: w must be [C_out,C_in,k,k], got {w.shape}")
    b, c, h, wd_ = x.shape
    cout, cin, k, _ = w.shape
    if c != cin:
        raise ShapeError(f"conv2d: C_in mismatch, x has {c} channels, w expects {cin}")
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd_, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: spatial size {h}x{wd_} too small for k={k}, pad={pad}")
    _record_macs(b * cout * ho * wo * cin * k * k)
    xd, wdata = x.data, w.data

    if k == 1 and pad == 0:
        xs = xd[:, :, ::stride, ::stride]
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, cin)
        wm = wdata.reshape(cout, cin)
        out = (cols @ wm.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

        def bw(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            dw = (g2.T @ cols).reshape(cout, cin, 1, 1)
            dxs = (g2 @ wm).reshape(b, ho, wo, cin).transpose(0, 3, 1, 2)
            if stride == 1:
                return np.ascontiguousarray(dxs), dw
            dx = np.zeros_like(xd)
            dx[:, :, ::stride, ::stride] = dxs
            return dx, dw

        return _make(np.ascontiguousarray(out), (x, w), bw)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = _windows(xp, k, stride, ho, wo)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * k * k)
    wm = wdata.reshape(cout, -1)
    out = (cols @ wm.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wm).reshape(b, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
        return _col2im(dcols, xd.shape, k, stride, pad), dw

    return _make(np.ascontiguousarray(out), (x, w), bw)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """Per-channel 2-d cross-correlation with weights [C, 1, k, k]."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d: x must be 4-d [B,C,H,W], got {x.shape}")
    if w.ndim != 4 or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"depthwise_conv2d: w must be [C,1,k,k], got {w.shape}")
    b, c, h, wd_ = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"depthwise_conv2d: channel mismatch, x has {c}, w has {w.shape[0]}")
    k = w.shape[2]
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd_, k, stride, pad)
    _record_macs(b * c * ho * wo * k * k)
    xd, wdata = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = _windows(xp, k, stride, ho, wo)
    wk = wdata[:, 0]
    out = np.einsum("bchwij,cij->bchw", win, wk)

    def bw(g):
        dw = np.einsum("bchwij,bchw->cij", win, g)[:, None]
        dwin = g[..., None, None] * wk[None, :, None, None]
        return _col2im(dwin, xd.shape, k, stride, pad), dw

    return _make(out, (x, w), bw)


def max_pool2d(x: Tensor, k: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    b, c, h, wd_ = x.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd_, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = _windows(xp, k, stride, ho, wo).reshape(b, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        dwin = np.zeros((b, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        return (_col2im(dwin.reshape(b, c, ho, wo, k, k), x.shape, k, stride, pad),)

    return _make(np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """z_c = mean over all spatial positions of channel c; [B,C,H,W] -> [B,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: x must be 4-d, got {x.shape}")
    b, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def bw(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(g.dtype),)

    return _make((x.data.sum(axis=(2, 3)) * scale).astype(x.dtype), (x,), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Batch normalisation over all axes but 1.

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place as ``momentum * old + (1 - momentum) * batch``
    (unbiased variance). In eval mode the running buffers are used.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: x must be 2-d or 4-d, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine shape {gamma.shape}, expected ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    if training:
        m = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            m = xd.size // c
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return _make(out.astype(xd.dtype), (x, gamma, beta), bw)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
               seed: int = 0) -> float:
    """Largest element-wise relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a Tensor of any shape; it is reduced to a scalar by a
    fixed random projection. Inputs are copied to float64. The relative error
    denominator is ``max(|analytic|, |numeric|, 1e-6)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    out0 = fn(*[Tensor(a) for a in arrays])
    proj = np.random.default_rng(seed).standard_normal(out0.shape)

    def scalar(arrs) -> float:
        with no_grad():
            return float((fn(*[Tensor(a) for a in arrs]).data * proj).sum())

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = tsum(mul(fn(*ts), Tensor(proj)))
    backward(loss)

    worst = 0.0
    for t, a in zip(ts, arrays):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar(arrays)
            flat[i] = orig - eps
            fm = scalar(arrays)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            an = analytic.reshape(-1)[i]
            err = abs(an - num) / max(abs(an), abs(num), 1e-6)
            worst = max(worst, err)
    return worst
