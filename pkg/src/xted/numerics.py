"""Dense float64 tensors with define-by-run reverse-mode autodiff and Adam.

Operations record onto the innermost active :class:`Graph`. Outside a graph
they run as plain numpy arithmetic, which is what inference paths use.

    with Graph() as g:
        loss = ((x @ w) - y).square().mean()
        g.backward(loss)
    w.grad  # populated
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError, DivergenceError, GraphError

LN_EPS = 1e-5

_local = threading.local()


def _graph_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_recorded")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor shape must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._recorded = False

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._recorded = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def square(self):
        return mul(self, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _tracked(t):
    return t.requires_grad


def _record(out_arr, parents, backward):
    """Wrap ``out_arr``; register ``backward`` on the active graph if needed.

    ``backward(g)`` returns one gradient (or None) per parent.
    """
    out = Tensor._wrap(out_arr)
    graph = active_graph()
    if graph is not None and any(_tracked(p) for p in parents):
        out.requires_grad = True
        out._recorded = True
        graph._push(out, parents, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Graph:
    """Define-by-run tape. One forward recording, one backward pass."""

    def __init__(self):
        self.nodes = []
        self._spent = False
        self._closed = False

    def __enter__(self):
        if self._spent or self._closed:
            raise GraphError("graph already used; create a new Graph per step")
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self._closed = True
        return False

    def _push(self, out, parents, backward):
        if self._spent:
            raise GraphError("cannot record onto a graph after backward")
        self.nodes.append((out, parents, backward))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
        if self._spent:
            raise GraphError("backward already ran on this graph")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._spent = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = backward(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._recorded:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
        if not loss._recorded and loss.requires_grad:
            loss.grad = np.ones_like(loss.data)


def zero_grad(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad * bd, (a, b), backward)


def _gemm(a2, b2):
    """2-D product whose rows do not depend on how many rows are stacked.

    BLAS routes a single-row product through a matrix-vector kernel that
    rounds differently, so one row is padded to two.
    """
    if a2.shape[0] == 1:
        return (np.concatenate([a2, a2]) @ b2)[:1]
    return a2 @ b2


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes.

    A 2-D right operand (a weight matrix) is the common case and its
    gradient is reduced over every leading axis of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # one GEMM over flattened leading axes instead of a per-slice loop
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record(_gemm(a2, bd).reshape(*lead, bd.shape[1]), (a, b), backward2)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i, j):
    a = as_tensor(a)
    return _record(
        np.ascontiguousarray(np.swapaxes(a.data, i, j)),
        (a,),
        lambda g: (np.swapaxes(g, i, j),),
    )


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g) if _fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return _record(np.array(a.data[idx]), (a,), backward)


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


def split(a, sizes, axis=-1):
    """Split ``a`` into consecutive chunks of the given sizes along ``axis``."""
    a = as_tensor(a)
    out, start = [], 0
    ax = axis % a.ndim
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + n)
        out.append(getitem(a, tuple(sl)))
        start += n
    if start != a.shape[ax]:
        raise DimensionError(f"split sizes {sizes} do not cover axis of length {a.shape[ax]}")
    return out


def gelu(x):
    """Smooth sigmoid-weighted linear unit, x * sigmoid(1.702 x)."""
    x = as_tensor(x)
    out, sig = kernels.gelu_forward(x.data)
    xd = x.data
    return _record(out, (x,), lambda g: (kernels.gelu_backward(g, xd, sig),))


def layer_norm(x, eps=LN_EPS):
    """Zero-mean, unit-variance normalization over the last axis (no affine)."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    xhat, rstd = kernels.layer_norm_forward(x.data, eps)
    return _record(xhat, (x,), lambda g: (kernels.layer_norm_backward(g, xhat, rstd),))


def softmax_attention(q, k, v, return_weights=False):
    """Scaled dot-product attention over trailing (L, d) axes.

    q: (..., L_q, d), k: (..., L_k, d), v: (..., L_k, d_v). Leading axes
    (batch, heads) broadcast as in numpy matmul.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if q.shape[-1] < 1:
        raise DimensionError("attention head width must be >= 1")
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    p = kernels.softmax_forward((qd @ np.swapaxes(kd, -1, -2)) * scale)

    def backward(g):
        gv = _unbroadcast(np.swapaxes(p, -1, -2) @ g, vd.shape)
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = kernels.softmax_backward(gp, p) * scale
        gq = _unbroadcast(gs @ kd, qd.shape)
        gk = _unbroadcast(np.swapaxes(gs, -1, -2) @ qd, kd.shape)
        return gq, gk, gv

    out = _record(p @ vd, (q, k, v), backward)
    if return_weights:
        return out, p
    return out


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros(p.data.size)
            state.v[name] = np.zeros(p.data.size)
        return state


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update in place.

    ``params`` maps names to Tensors, ``grads`` maps the same names to arrays
    (a missing entry counts as a zero gradient). Returns ``(params, state)``.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    for name, p in params.items():
        if name not in state.m or state.m[name].size != p.data.size:
            raise DimensionError(f"optimizer state does not match parameter {name!r}")
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.data.size)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        flat = p.data.reshape(-1)
        kernels.adam_update(
            flat, g, state.m[name], state.v[name],
            state.lr, state.beta1, state.beta2, state.eps, state.step,
        )
    return params, state
