"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a C-contiguous ndarray. Operations record a closure
that maps the output gradient to input gradients; :func:`backward` replays the
closures in reverse topological order and accumulates into the ``grad``
buffers of reachable :class:`Parameter` leaves.

Every forward result is checked for NaN/Inf and a :class:`NonFiniteError`
naming the producing operation is raised instead of letting the value
propagate.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as K

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""

    def __init__(self, op: str, count: int):
        super().__init__(f"operation '{op}' produced {count} non-finite value(s)")
        self.op = op


class GraphConsumedError(RuntimeError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check(out: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.isfinite(out).all():
        raise NonFiniteError(op, int((~np.isfinite(out)).sum()))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op",
                 "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dt = dtype or (data.dtype.type if isinstance(data, np.ndarray)
                       and data.dtype.kind == "f" else _DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(data, dtype=dt)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- metadata -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable leaf with gradient and AdamW moment buffers."""

    __slots__ = ("name", "m", "v", "decay")

    def __init__(self, data, name: str = "", decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.decay = decay

    def zero_grad(self) -> None:
        self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.grad = None
    out._op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every Parameter reachable from scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        loss._consumed = True
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward()")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if isinstance(node, Parameter):
            if g is not None:
                node.grad += g
            continue
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g if node.grad is None else node.grad + g
            continue
        if g is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    b = _coerce(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    b = _coerce(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    b = _coerce(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad ** p
    return _make(out, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)
    return _make(ad * s, (a,), lambda g: (g * (s * (1 + ad * (1 - s))),), "silu")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    ad = a.data
    pos = ad > 0
    out = np.where(pos, ad, ad * slope)
    return _make(out, (a,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    ad = a.data
    return _make(K.gelu_fwd(ad), (a,), lambda g: (K.gelu_bwd(ad, g),), "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    n = 1
    for i in ax:
        n *= a.shape[i]
    return mul(tsum(a, ax, keepdims), 1.0 / n) if n else tsum(a, ax, keepdims)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), bw, "logsumexp")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),),
                 "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dt = a.shape, a.dtype
    out = np.ascontiguousarray(a.data[idx])

    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        out = []
        for i in range(len(ts)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return out

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    b = _coerce(b, a)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.ascontiguousarray(np.swapaxes(bd, -1, -2))),
                              ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.ascontiguousarray(np.swapaxes(ad, -1, -2)), g),
                              bd.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` applied over the last axis of ``x``; w has shape (in, out)."""
    lead = x.shape[:-1]
    din, dout = w.shape
    if x.shape[-1] != din:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {din}")
    x2 = x.data.reshape(-1, din)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    wd = w.data

    def bw(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ wd.T).reshape(lead + (din,)) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(lead + (dout,)), parents, bw, "linear")


# ---------------------------------------------------------------------------
# fused neural-network primitives
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    shp = moved.shape
    y = K.softmax_fwd(np.ascontiguousarray(moved).reshape(-1, shp[-1])).reshape(shp)

    def bw(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1)).reshape(-1, shp[-1])
        gx = K.softmax_bwd(y.reshape(-1, shp[-1]), gm).reshape(shp)
        return (np.moveaxis(gx, -1, axis),)

    return _make(np.moveaxis(y, -1, axis), (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None,
               eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    shp = x.shape
    xhat, rstd = K.layernorm_fwd(x.data.reshape(-1, d), eps)
    out = xhat
    if gamma is not None:
        out = xhat * gamma.data + beta.data
    out = out.reshape(shp)

    def bw(g):
        g2 = g.reshape(-1, d)
        gxhat = g2 * gamma.data if gamma is not None else g2
        gx = K.layernorm_bwd(gxhat, xhat, rstd).reshape(shp) if x.requires_grad else None
        if gamma is None:
            return (gx,)
        return gx, (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    parents = (x,) if gamma is None else (x, gamma, beta)
    return _make(out, parents, bw, "layer_norm")


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over (..., S, dh) inputs."""
    qd, kd, vd = q.data, k.data, v.data
    scale = 1.0 / math.sqrt(qd.shape[-1])
    kt = np.ascontiguousarray(np.swapaxes(kd, -1, -2))
    s = np.matmul(qd, kt)
    s *= scale
    shp = s.shape
    p = K.softmax_fwd(s.reshape(-1, shp[-1])).reshape(shp)
    out = np.matmul(p, vd)

    def bw(g):
        gv = np.matmul(np.ascontiguousarray(np.swapaxes(p, -1, -2)), g)
        gp = np.matmul(g, np.ascontiguousarray(np.swapaxes(vd, -1, -2)))
        gs = K.softmax_bwd(p.reshape(-1, shp[-1]), gp.reshape(-1, shp[-1])).reshape(shp)
        gs *= scale
        gq = np.matmul(gs, kd)
        gk = np.matmul(np.ascontiguousarray(np.swapaxes(gs, -1, -2)), qd)
        return gq, gk, gv

    return _make(out, (q, k, v), bw, "attention")


def self_attention(qkv: Tensor, heads: int) -> Tensor:
    """Multi-head self-attention on packed projections.

    ``qkv`` is (B, S, 3*d) laid out as [q | k | v]; returns (B, S, d) with heads
    merged back in order.
    """
    b, s_len, d3 = qkv.shape
    d = d3 // 3
    if d % heads:
        raise ValueError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads
    t = np.ascontiguousarray(qkv.data.reshape(b, s_len, 3, heads, dh).transpose(2, 0, 3, 1, 4))
    qd, kd, vd = t[0], t[1], t[2]
    scale = 1.0 / math.sqrt(dh)
    s = np.matmul(qd, kd.swapaxes(-1, -2))
    s *= scale
    shp = s.shape
    p = K.softmax_fwd(s.reshape(-1, s_len)).reshape(shp)
    o = np.matmul(p, vd)
    out = o.transpose(0, 2, 1, 3).reshape(b, s_len, d)

    def bw(g):
        go = np.ascontiguousarray(g.reshape(b, s_len, heads, dh).transpose(0, 2, 1, 3))
        gt = np.empty((3,) + qd.shape, dtype=qd.dtype)
        np.matmul(p.swapaxes(-1, -2), go, out=gt[2])
        gp = np.matmul(go, vd.swapaxes(-1, -2))
        gs = K.softmax_bwd(p.reshape(-1, s_len), gp.reshape(-1, s_len)).reshape(shp)
        gs *= scale
        np.matmul(gs, kd, out=gt[0])
        np.matmul(gs.swapaxes(-1, -2), qd, out=gt[1])
        return (gt.transpose(1, 3, 0, 2, 4).reshape(b, s_len, d3),)

    return _make(np.ascontiguousarray(out), (qkv,), bw, "self_attention")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with an (O, C, k, k) kernel."""
    b, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if kh != kw:
        raise ValueError("conv2d: only square kernels are supported")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = K.im2col(x.data, kh, stride, padding)
    wmat = kernel.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gx = None
        if x.requires_grad:
            gx = K.col2im(g2 @ wmat, (b, c, h, w), kh, stride, padding)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def pixel_unshuffle_grid(x: Tensor, r: int) -> Tensor:
    """(B, g, g, d) token grid -> (B, g/r, g/r, r*r*d) by merging r x r groups."""
    b, gh, gw, d = x.shape
    if gh % r or gw % r:
        raise ValueError(f"grid {gh}x{gw} not divisible by group {r}")
    y = reshape(x, (b, gh // r, r, gw // r, r, d))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (b, gh // r, gw // r, r * r * d))


def pixel_shuffle_grid(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_unshuffle_grid`."""
    b, gh, gw, dd = x.shape
    d = dd // (r * r)
    y = reshape(x, (b, gh, gw, r, r, d))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (b, gh * r, gw * r, d))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    nrm = np.maximum(nrm, eps)
    out = xd / nrm

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / nrm,)

    return _make(out, (x,), bw, "l2_normalize")


def cross_entropy_soft(target: np.ndarray, logits: Tensor, axis: int = -1) -> Tensor:
    """Per-row ``-sum target * log_softmax(logits)``; target is a constant array."""
    return mul(tsum(mul(log_softmax(logits, axis), Tensor(target)), axis), -1.0)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
