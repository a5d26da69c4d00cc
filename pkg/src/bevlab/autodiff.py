"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the BEV pipeline actually composes are implemented; this
is deliberately not a general autodiff framework (no broadcasting-complete op
set, no graph optimization). Every op accepts plain numpy arrays or scalars
and returns a plain array when no ``Var`` is involved, so the same forward
code serves both the fast inference path and the differentiable path used by
the gradient suite and the fitting routine.
"""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = [
    "Var", "val", "is_traced",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt",
    "tanh", "sigmoid", "relu", "absolute", "sin", "cos", "atan2", "clip",
    "matmul", "sum_", "mean", "reshape", "transpose", "concat", "stack",
    "getitem", "where_mask", "softmax", "layer_norm", "bilinear_gather",
    "lift_tree", "unlift_tree", "sgd_step",
]


def val(x):
    """Underlying ndarray (or scalar) of a Var or plain value."""
    return x.data if isinstance(x, Var) else x


def is_traced(*xs):
    return any(isinstance(x, Var) and x.requires_grad for x in xs)


class Var:
    """A node in the backward tape wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return self.data

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # arithmetic sugar
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
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data, parents, vjp):
    """Build a tape node; collapse to a plain array when nothing is traced.

    The plain path keeps the input dtype (float32 stays float32 on the
    bench path); traced Vars are always float64.
    """
    live = tuple(p for p in parents if isinstance(p, Var) and p.requires_grad)
    if not live:
        return np.asarray(data)
    out = Var(data)
    out.requires_grad = True
    out._parents = live
    out._vjp = vjp
    return out


def _accum(p, g):
    if isinstance(p, Var) and p.requires_grad:
        p.grad = g if p.grad is None else p.grad + g


def _unbroadcast(g, shape):
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    va, vb = val(a), val(b)
    y = va + vb

    def vjp(g):
        _accum(a, _unbroadcast(g, np.shape(va)))
        _accum(b, _unbroadcast(g, np.shape(vb)))

    return _node(y, (a, b), vjp)


def sub(a, b):
    va, vb = val(a), val(b)
    y = va - vb

    def vjp(g):
        _accum(a, _unbroadcast(g, np.shape(va)))
        _accum(b, _unbroadcast(-g, np.shape(vb)))

    return _node(y, (a, b), vjp)


def mul(a, b):
    va, vb = val(a), val(b)
    y = va * vb

    def vjp(g):
        _accum(a, _unbroadcast(g * vb, np.shape(va)))
        _accum(b, _unbroadcast(g * va, np.shape(vb)))

    return _node(y, (a, b), vjp)


def div(a, b):
    va, vb = val(a), val(b)
    y = va / vb

    def vjp(g):
        _accum(a, _unbroadcast(g / vb, np.shape(va)))
        _accum(b, _unbroadcast(-g * va / (vb * vb), np.shape(vb)))

    return _node(y, (a, b), vjp)


def neg(a):
    def vjp(g):
        _accum(a, -g)

    return _node(-val(a), (a,), vjp)


def power(a, p):
    """a ** p for a constant exponent p."""
    va = val(a)
    y = va ** p

    def vjp(g):
        if p == 0:
            _accum(a, np.zeros_like(va))
        else:
            _accum(a, g * p * va ** (p - 1))

    return _node(y, (a,), vjp)


def exp(a):
    y = np.exp(val(a))

    def vjp(g):
        _accum(a, g * y)

    return _node(y, (a,), vjp)


def log(a):
    va = val(a)

    def vjp(g):
        _accum(a, g / va)

    return _node(np.log(va), (a,), vjp)


def sqrt(a):
    y = np.sqrt(val(a))

    def vjp(g):
        _accum(a, g / (2.0 * y))

    return _node(y, (a,), vjp)


def tanh(a):
    y = np.tanh(val(a))

    def vjp(g):
        _accum(a, g * (1.0 - y * y))

    return _node(y, (a,), vjp)


def sigmoid(a):
    va = val(a)
    y = np.where(va >= 0, 1.0 / (1.0 + np.exp(-np.abs(va))),
                 np.exp(-np.abs(va)) / (1.0 + np.exp(-np.abs(va))))

    def vjp(g):
        _accum(a, g * y * (1.0 - y))

    return _node(y, (a,), vjp)


def relu(a):
    va = val(a)
    y = np.maximum(va, 0.0)

    def vjp(g):
        _accum(a, g * (va > 0))

    return _node(y, (a,), vjp)


def absolute(a):
    va = val(a)

    def vjp(g):
        _accum(a, g * np.sign(va))

    return _node(np.abs(va), (a,), vjp)


def sin(a):
    va = val(a)

    def vjp(g):
        _accum(a, g * np.cos(va))

    return _node(np.sin(va), (a,), vjp)


def cos(a):
    va = val(a)

    def vjp(g):
        _accum(a, -g * np.sin(va))

    return _node(np.cos(va), (a,), vjp)


def atan2(y, x):
    vy, vx = val(y), val(x)
    denom = vx * vx + vy * vy

    def vjp(g):
        _accum(y, _unbroadcast(g * vx / denom, np.shape(vy)))
        _accum(x, _unbroadcast(-g * vy / denom, np.shape(vx)))

    return _node(np.arctan2(vy, vx), (y, x), vjp)


def clip(a, lo, hi):
    """Clamp with zero gradient outside (lo, hi)."""
    va = val(a)
    inside = (va > lo) & (va < hi)

    def vjp(g):
        _accum(a, g * inside)

    return _node(np.clip(va, lo, hi), (a,), vjp)


def where_mask(mask, a, b):
    """Elementwise select by a constant boolean mask (gradient splits)."""
    m = np.asarray(mask, dtype=bool)
    va, vb = val(a), val(b)
    y = np.where(m, va, vb)

    def vjp(g):
        _accum(a, _unbroadcast(g * m, np.shape(va)))
        _accum(b, _unbroadcast(g * ~m, np.shape(vb)))

    return _node(y, (a, b), vjp)


# ---------------------------------------------------------------------------
# linear algebra / shape ops


def matmul(a, b):
    """1D/2D matmul and batched 3D@3D; the only shapes the pipeline needs."""
    va, vb = val(a), val(b)
    na, nb = np.ndim(va), np.ndim(vb)
    y = np.matmul(va, vb)

    if na == 2 and nb == 2:
        def vjp(g):
            _accum(a, g @ vb.T)
            _accum(b, va.T @ g)
    elif na == 1 and nb == 2:
        def vjp(g):
            _accum(a, vb @ g)
            _accum(b, np.outer(va, g))
    elif na == 2 and nb == 1:
        def vjp(g):
            _accum(a, np.outer(g, vb))
            _accum(b, va.T @ g)
    elif na == 3 and nb == 3:
        def vjp(g):
            _accum(a, np.matmul(g, vb.swapaxes(-1, -2)))
            _accum(b, np.matmul(va.swapaxes(-1, -2), g))
    else:
        raise ValueError(f"unsupported matmul ranks: {na} @ {nb}")

    return _node(y, (a, b), vjp)


def sum_(a, axis=None, keepdims=False):
    va = np.asarray(val(a))
    y = va.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, va.shape).copy())

    return _node(y, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    va = val(a)
    n = va.size if axis is None else np.prod(
        [va.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    va = np.asarray(val(a))

    def vjp(g):
        _accum(a, g.reshape(va.shape))

    return _node(va.reshape(shape), (a,), vjp)


def transpose(a, axes=None):
    va = val(a)
    y = np.transpose(va, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        _accum(a, np.transpose(g, inv))

    return _node(y, (a,), vjp)


def concat(parts, axis=0):
    vs = [val(p) for p in parts]
    y = np.concatenate(vs, axis=axis)
    sizes = [v.shape[axis] for v in vs]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _node(y, tuple(parts), vjp)


def stack(parts, axis=0):
    vs = [val(p) for p in parts]
    y = np.stack(vs, axis=axis)

    def vjp(g):
        for i, p in enumerate(parts):
            _accum(p, np.take(g, i, axis=axis))

    return _node(y, tuple(parts), vjp)


def getitem(a, idx):
    va = val(a)
    y = va[idx]

    def vjp(g):
        ga = np.zeros_like(va)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _node(y, (a,), vjp)


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis`."""
    va = np.asarray(val(a))
    shifted = va - va.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _node(y, (a,), vjp)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    va = np.asarray(val(a))
    mu = va.mean(axis=-1, keepdims=True)
    xc = va - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    s = np.sqrt(var + eps)
    y = xc / s

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, (g - gm - y * gy) / s)

    return _node(y, (a,), vjp)


def bilinear_gather(fmap, xs, ys):
    """Bilinear samples of a [C, H, W] map at N continuous (x, y) points.

    x indexes columns (width), y indexes rows (height). Points outside the
    closed box [0, W-1] x [0, H-1] yield a zero row and valid=False.
    Differentiable in the map and in both coordinate arrays.

    Returns (samples [N, C], valid [N] plain bool array).
    """
    vf, vx, vy = val(fmap), val(xs), val(ys)
    C, H, W = vf.shape
    valid = (vx >= 0) & (vx <= W - 1) & (vy >= 0) & (vy <= H - 1)

    xc = np.clip(vx, 0.0, W - 1.0)
    yc = np.clip(vy, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(xc), max(W - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(yc), max(H - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xc - x0
    fy = yc - y0

    v00 = vf[:, y0, x0]  # [C, N]
    v01 = vf[:, y0, x1]
    v10 = vf[:, y1, x0]
    v11 = vf[:, y1, x1]
    out = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
           + v10 * (1 - fx) * fy + v11 * fx * fy)
    out = (out * valid).T  # [N, C]

    def vjp(g):
        gv = g * valid[:, None]  # [N, C]
        if isinstance(fmap, Var) and fmap.requires_grad:
            acc = np.zeros((H * W, C))
            np.add.at(acc, y0 * W + x0, gv * ((1 - fx) * (1 - fy))[:, None])
            np.add.at(acc, y0 * W + x1, gv * (fx * (1 - fy))[:, None])
            np.add.at(acc, y1 * W + x0, gv * ((1 - fx) * fy)[:, None])
            np.add.at(acc, y1 * W + x1, gv * (fx * fy)[:, None])
            _accum(fmap, acc.T.reshape(C, H, W))
        if isinstance(xs, Var) and xs.requires_grad:
            ddx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy  # [C, N]
            _accum(xs, (gv * ddx.T).sum(axis=1))
        if isinstance(ys, Var) and ys.requires_grad:
            ddy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
            _accum(ys, (gv * ddy.T).sum(axis=1))

    return _node(out, (fmap, xs, ys), vjp), valid


# ---------------------------------------------------------------------------
# parameter-tree utilities for the fitting routine


def lift_tree(obj, out=None):
    """Deep-copy a parameter tree, replacing every ndarray leaf by a
    trainable Var. Returns (lifted, ordered list of Vars)."""
    if out is None:
        out = []
        lifted = lift_tree(obj, out)
        return lifted, out
    if isinstance(obj, Var):
        out.append(obj)
        return obj
    if isinstance(obj, np.ndarray):
        v = Var(obj.copy(), requires_grad=True)
        out.append(v)
        return v
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kw = {f.name: lift_tree(getattr(obj, f.name), out)
              for f in dataclasses.fields(obj)}
        return type(obj)(**kw)
    if isinstance(obj, (list, tuple)):
        return type(obj)(lift_tree(x, out) for x in obj)
    return obj


def unlift_tree(obj):
    """Inverse of lift_tree: Var leaves back to plain ndarrays."""
    if isinstance(obj, Var):
        return obj.data.copy()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kw = {f.name: unlift_tree(getattr(obj, f.name))
              for f in dataclasses.fields(obj)}
        return type(obj)(**kw)
    if isinstance(obj, (list, tuple)):
        return type(obj)(unlift_tree(x) for x in obj)
    return obj


def tree_map(fn, obj):
    """Apply fn to every ndarray leaf of a dataclass/sequence tree."""
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kw = {f.name: tree_map(fn, getattr(obj, f.name))
              for f in dataclasses.fields(obj)}
        return type(obj)(**kw)
    if isinstance(obj, (list, tuple)):
        return type(obj)(tree_map(fn, x) for x in obj)
    return obj


def sgd_step(params, lr):
    """In-place gradient-descent update; consumes and clears .grad."""
    for v in params:
        if v.grad is not None:
            v.data = v.data - lr * v.grad
            v.grad = None
