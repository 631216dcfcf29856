"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine in the micrograd tradition: every operation
returns a new Tensor whose closure knows how to route the upstream
gradient to its inputs. The tape is the implicit DAG of ``_parents``
links; ``backward`` walks it once in reverse topological order.

Everything runs on the CPU in whatever float dtype the caller supplies.
Training defaults to float32 for throughput; finite-difference
verification requires float64.
"""

from __future__ import annotations

import math
import struct
import threading

import numpy as np

from .errors import ConfigError, ContractError, FormatError, GradCheckError, SizeError

_tape_state = threading.local()


def _recording():
    return getattr(_tape_state, "enabled", True)


class no_grad:
    """Context manager that pauses tape recording on the current thread."""

    def __enter__(self):
        self._saved = _recording()
        _tape_state.enabled = False
        return self

    def __exit__(self, *exc):
        _tape_state.enabled = self._saved
        return False


class Tensor:
    """N-d float array with optional gradient-tape participation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data, parents, op, backward):
        t = cls(data)
        if _recording() and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward
            t._op = op
        return t

    # -- basic introspection ---------------------------------------------------

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

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, grad={self.requires_grad})"

    # -- backward pass ---------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        Repeated calls keep accumulating; ``zero_grad`` resets.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:  # iterative DFS; deep tapes overflow Python recursion
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable tensor with a learning-rate group tag (``backbone`` or ``head``)."""

    __slots__ = ("name", "group")

    def __init__(self, data, group="head", name=""):
        if group not in ("backbone", "head"):
            raise ConfigError(f"unknown parameter group {group!r}")
        super().__init__(data, requires_grad=True)
        self.group = group
        self.name = name


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# -- elementwise arithmetic -------------------------------------------------------


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ContractError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Tensor._from_op(out, (a, b), "add", bw)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data - b.data
    except ValueError:
        raise ContractError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return Tensor._from_op(out, (a, b), "sub", bw)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ContractError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return Tensor._from_op(out, (a, b), "mul", bw)


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data / b.data
    except ValueError:
        raise ContractError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return Tensor._from_op(out, (a, b), "div", bw)


def relu(a):
    out = np.maximum(a.data, 0)

    def bw(g):
        _accumulate(a, g * (a.data > 0))

    return Tensor._from_op(out, (a,), "relu", bw)


def tanh(a):
    out = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out * out))

    return Tensor._from_op(out, (a,), "tanh", bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out)

    return Tensor._from_op(out, (a,), "exp", bw)


def log(a):
    out = np.log(a.data)

    def bw(g):
        _accumulate(a, g / a.data)

    return Tensor._from_op(out, (a,), "log", bw)


# -- shape manipulation -----------------------------------------------------------


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        _accumulate(a, np.transpose(g, inv))

    return Tensor._from_op(out, (a,), "transpose", bw)


def reshape(a, shape):
    out = a.data.reshape(shape)
    orig = a.data.shape

    def bw(g):
        _accumulate(a, g.reshape(orig))

    return Tensor._from_op(out, (a,), "reshape", bw)


def concat(tensors, axis=0):
    tensors = [(_as_tensor(t)) for t in tensors]
    if not tensors:
        raise ContractError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ContractError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return Tensor._from_op(out, tuple(tensors), "concat", bw)


def crop2d(a, height, width):
    """Keep the top-left ``height`` x ``width`` window of a (C, H, W) tensor."""
    out = a.data[:, :height, :width]

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, :height, :width] = g
        _accumulate(a, full)

    return Tensor._from_op(out.copy(), (a,), "crop2d", bw)


# -- reductions ---------------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return Tensor._from_op(out, (a,), "sum", bw)


def tensor_mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape) / denom)

    return Tensor._from_op(out, (a,), "mean", bw)


# -- linear algebra -------------------------------------------------------------------


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor._from_op(out, (a, b), "matmul", bw)


# -- softmax family --------------------------------------------------------------------


def softmax(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - dot))

    return Tensor._from_op(out, (a,), "softmax", bw)


def log_softmax(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(out, (a,), "log_softmax", bw)


def layernorm(x, gamma, beta, axis=-1, eps=1e-5):
    """Normalize along ``axis`` to zero mean / unit variance, then affine-map."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        _accumulate(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        _accumulate(beta, _unbroadcast(g, beta.data.shape))
        dxhat = g * gamma.data
        term = dxhat - dxhat.mean(axis=axis, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        _accumulate(x, inv * term)

    return Tensor._from_op(out, (x, gamma, beta), "layernorm", bw)


# -- convolutions ------------------------------------------------------------------------


def _windows(xp, kh, kw, stride):
    """Sliding windows of a padded (C, Hp, Wp) array -> (C, kh, kw, OH, OW) view."""
    c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (c, kh, kw, oh, ow), (sc, sh, sw, stride * sh, stride * sw), writeable=False
    )


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D convolution of one image: x (Cin, H, W), w (Cout, Cin, kh, kw)."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ContractError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    cin, h, width = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, stride)
    oh, ow = win.shape[3], win.shape[4]
    col = win.reshape(cin * kh * kw, oh * ow)
    out = (w.data.reshape(cout, -1) @ col).reshape(cout, oh, ow)
    if b is not None:
        out = out + b.data[:, None, None]

    def bw(g):
        gm = g.reshape(cout, -1)
        _accumulate(w, (gm @ col.T).reshape(w.data.shape))
        if b is not None:
            _accumulate(b, g.sum(axis=(1, 2)))
        if x.requires_grad:
            dcol = (w.data.reshape(cout, -1).T @ gm).reshape(cin, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcol[:, i, j]
            _accumulate(x, dxp[:, pad:pad + h, pad:pad + width])

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, "conv2d", bw)


def depthwise_conv2d(x, w, b=None, pad=1):
    """Per-channel 2-D convolution, stride 1: x (C, H, W), w (C, kh, kw)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[0] != w.shape[0]:
        raise ContractError(f"depthwise_conv2d: input {x.shape} vs weight {w.shape}")
    c, h, width = x.shape
    _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, 1)
    oh, ow = win.shape[3], win.shape[4]
    out = np.einsum("ckl,cklmn->cmn", w.data, win)
    if b is not None:
        out = out + b.data[:, None, None]

    def bw(g):
        _accumulate(w, np.einsum("cmn,cklmn->ckl", g, win))
        if b is not None:
            _accumulate(b, g.sum(axis=(1, 2)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + oh, j:j + ow] += w.data[:, i, j][:, None, None] * g
            _accumulate(x, dxp[:, pad:pad + h, pad:pad + width])

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, "depthwise_conv2d", bw)


def depthwise_conv1d(x, w, b=None, pad=1):
    """Per-channel 1-D convolution along the token axis: x (N, C), w (C, k)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractError(f"depthwise_conv1d: input {x.shape} vs weight {w.shape}")
    n, c = x.shape
    k = w.shape[1]
    if k != 2 * pad + 1:
        raise ContractError(f"depthwise_conv1d: kernel {k} needs pad {(k - 1) // 2}")
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for t in range(k):
        out += w.data[:, t][None, :] * xp[t:t + n]
    if b is not None:
        out = out + b.data[None, :]

    def bw(g):
        dw = np.empty_like(w.data)
        for t in range(k):
            dw[:, t] = (g * xp[t:t + n]).sum(axis=0)
        _accumulate(w, dw)
        if b is not None:
            _accumulate(b, g.sum(axis=0))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for t in range(k):
                dxp[t:t + n] += w.data[:, t][None, :] * g
            _accumulate(x, dxp[pad:pad + n])

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, "depthwise_conv1d", bw)


def maxpool2d(x, size=2):
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    c, h, w = x.shape
    if h % size or w % size:
        raise ContractError(f"maxpool2d: {x.shape} not divisible by {size}")
    oh, ow = h // size, w // size
    win = x.data.reshape(c, oh, size, ow, size).transpose(0, 1, 3, 2, 4).reshape(c, oh, ow, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], -1)[..., 0]

    def bw(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, arg[..., None], g[..., None], -1)
        dx = dwin.reshape(c, oh, ow, size, size).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        _accumulate(x, dx)

    return Tensor._from_op(out, (x,), "maxpool2d", bw)


def bilinear_upsample(x, factor):
    """Upsample (C, H, W) by an integer factor; sample centers at (i+0.5)/f - 0.5."""
    if factor < 1 or int(factor) != factor:
        raise ContractError(f"bilinear_upsample: bad factor {factor}")
    factor = int(factor)
    c, h, w = x.shape

    def _axis(n):
        src = (np.arange(n * factor) + 0.5) / factor - 0.5
        src = np.clip(src, 0, n - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n - 1)
        frac = src - i0
        return i0, i1, frac

    y0, y1, fy = _axis(h)
    x0, x1, fx = _axis(w)
    wy0, wy1 = (1.0 - fy)[None, :, None], fy[None, :, None]
    wx0, wx1 = (1.0 - fx)[None, None, :], fx[None, None, :]
    d = x.data
    out = wy0 * (wx0 * d[:, y0[:, None], x0[None, :]] + wx1 * d[:, y0[:, None], x1[None, :]]) \
        + wy1 * (wx0 * d[:, y1[:, None], x0[None, :]] + wx1 * d[:, y1[:, None], x1[None, :]])

    def bw(g):
        dx = np.zeros_like(d)
        ci = np.arange(c)[:, None, None]
        for yi, wy in ((y0, wy0), (y1, wy1)):
            for xi, wx in ((x0, wx0), (x1, wx1)):
                np.add.at(dx, (ci, yi[None, :, None], xi[None, None, :]), wy * wx * g)
        _accumulate(x, dx)

    return Tensor._from_op(out, (x,), "bilinear_upsample", bw)


# -- indexed gathers and scatters -------------------------------------------------------------


def gather_rows(x, idx):
    """Select rows of a (N, C) tensor; duplicate indices are allowed."""
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx]

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _accumulate(x, dx)

    return Tensor._from_op(out, (x,), "gather_rows", bw)


def scatter_mean(x, index, num_groups):
    """Group rows of a (N, C) tensor by ``index`` and average; empty groups are zero."""
    index = np.asarray(index, dtype=np.intp)
    if index.shape[0] != x.shape[0]:
        raise ContractError(f"scatter_mean: {index.shape[0]} indices for {x.shape[0]} rows")
    counts = np.bincount(index, minlength=num_groups)
    sums = np.zeros((num_groups, x.shape[1]), dtype=x.data.dtype)
    np.add.at(sums, index, x.data)
    out = sums / np.maximum(counts, 1)[:, None]

    def bw(g):
        _accumulate(x, g[index] / counts[index][:, None])

    return Tensor._from_op(out, (x,), "scatter_mean", bw)


# -- optimization -------------------------------------------------------------------------------


class SGD:
    """Momentum SGD with weight decay and a two-rate parameter grouping.

    Update rule per parameter: v <- momentum * v + grad + weight_decay * w,
    then w <- w - lr(group) * v where the head group runs at
    ``head_lr_multiplier`` times the backbone rate.
    """

    def __init__(self, params, momentum=0.9, weight_decay=1e-4, head_lr_multiplier=10.0):
        self.params = list(params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.head_lr_multiplier = float(head_lr_multiplier)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                name = getattr(p, "name", "") or "<unnamed>"
                raise ContractError(f"parameter {name} has no gradient")
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            group = getattr(p, "group", "head")
            rate = lr * (self.head_lr_multiplier if group == "head" else 1.0)
            p.data -= rate * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def poly_lr(initial, iteration, max_iter, power=0.9):
    """Polynomial decay: initial * (1 - iteration / max_iter) ** power."""
    if max_iter <= 0:
        raise ConfigError(f"poly_lr: max_iter must be positive, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ContractError(f"poly_lr: iteration {iteration} outside [0, {max_iter}]")
    return float(initial) * (1.0 - iteration / max_iter) ** power


# -- finite-difference verification --------------------------------------------------------------


def _check_finite(out):
    """Walk the tape below ``out``; report the op that introduced non-finite values."""
    stack = [out]
    seen = set()
    culprit = None
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if not np.all(np.isfinite(node.data)):
            # deepest offender: bad output from finite inputs
            if all(np.all(np.isfinite(p.data)) for p in node._parents):
                raise GradCheckError(f"non-finite values produced by op {node._op!r}")
            culprit = node
        stack.extend(node._parents)
    if culprit is not None:
        raise GradCheckError(f"non-finite values produced by op {culprit._op!r}")


def grad_check(f, xs, eps=1e-5):
    """Max relative error between tape gradients and central finite differences.

    ``f`` maps the given tensors to a scalar Tensor. Inputs must be float64;
    the error at component k is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    if not (1e-6 <= eps <= 1e-3):
        raise ConfigError(f"grad_check: eps {eps} outside [1e-6, 1e-3]")
    for x in xs:
        if x.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 inputs")
        x.requires_grad = True
        x.grad = None
    out = f(*xs)
    if out.data.size != 1:
        raise ContractError("grad_check: program must be scalar-valued")
    _check_finite(out)
    out.backward()
    grads = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]
    worst = 0.0
    with no_grad():
        for x, ga in zip(xs, grads):
            flat = x.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                fp = float(f(*xs).data)
                flat[i] = saved - eps
                fm = float(f(*xs).data)
                flat[i] = saved
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise GradCheckError("non-finite value during finite-difference probe")
                gfd = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - gfd) / max(1.0, abs(gflat[i]), abs(gfd))
                worst = max(worst, err)
    return worst


# -- checkpoint format ----------------------------------------------------------------------------

CKPT_MAGIC = b"CKPT"


def save_checkpoint(named_params, path):
    """Write (name, tensor) pairs: magic, count, then per-entry
    name length / name bytes / rank / extents / float32 payload, all little-endian."""
    items = [(name, t.data if isinstance(t, Tensor) else np.asarray(t)) for name, t in named_params]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", a.ndim))
            if a.ndim:
                fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered dict of name -> float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise SizeError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        out[name] = arr.copy()
    if pos != len(blob):
        raise SizeError("trailing bytes after checkpoint payload")
    return out
