"""Minimal reverse-mode tensor engine on numpy.

Every differentiable op records a node on a per-forward tape (parent tensors
plus a closure that maps the output gradient to parent gradients). backward()
walks the tape once in reverse topological order and then discards it.

Broadcasting is deliberately restricted: elementwise ops require identical
shapes, matmul may broadcast leading batch dimensions only. Anything else
needs an explicit reshape at the call site.
"""

import contextlib

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, NumericFailure

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype):
    """Set the global float precision (np.float32 or np.float64)."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractViolation(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """A numpy array plus an optional gradient slot and tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar (same-shape or scalar only, see module docstring)
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    def __sub__(self, other):
        if np.isscalar(other):
            return add_scalar(self, -other)
        return add(self, neg(other))

    def __mul__(self, other):
        return mul_scalar(self, other) if np.isscalar(other) else mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    """Build an op result; records the tape node only when grads are live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss):
    """Backpropagate from a scalar loss; fills .grad on reachable leaves.

    The tape is freed as it is consumed, so a graph can be backed through
    only once per forward pass.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericFailure("loss is not finite")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            if g is not None and node._backward is None:
                # leaf: accumulate into the persistent grad slot
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


def _same_shape(a, b, what):
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"{what}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def add_scalar(a, c):
    c = float(c)
    return _node(a.data + np.asarray(c, dtype=a.data.dtype), (a,), lambda g: (g,))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def mul_scalar(a, c):
    c = float(c)
    return _node(a.data * np.asarray(c, dtype=a.data.dtype), (a,), lambda g: (g * c,))


def square(a):
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a):
    ad = a.data
    mask = ad > 0
    return _node(np.where(mask, ad, 0), (a,), lambda g: (g * mask,))


def silu(a):
    ad = a.data
    sig = expit(ad)
    out = ad * sig

    def bwd(g):
        return (g * (sig * (1.0 + ad * (1.0 - sig))),)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a, shape):
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors, axis):
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate(datas, axis=axis), tuple(tensors), bwd)


def gather_rows(table, ids):
    """Embedding lookup: table (V, d), ids int array (...,) -> (..., d)."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (dt,)

    return _node(out, (table,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a):
    shape = a.data.shape
    return _node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a):
    n = a.data.size
    shape = a.data.shape
    return _node(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def mean_per_sample(a):
    """(B, ...) -> (B,): mean over all non-batch elements."""
    b = a.data.shape[0]
    n = a.data.size // b if b else 1
    shape = a.data.shape

    def bwd(g):
        return ((g / n).reshape((b,) + (1,) * (len(shape) - 1)) * np.ones(shape, a.data.dtype),)

    return _node(a.data.reshape(b, -1).mean(axis=1), (a,), bwd)


def dot(a, b):
    """1-D dot product (used for weighted loss reduction)."""
    _same_shape(a, b, "dot")
    ad, bd = a.data, b.data
    return _node(np.asarray(ad @ bd, dtype=ad.dtype), (a, b),
                 lambda g: (g * bd, g * ad))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _reduce_to(g, shape):
    """Sum g down to `shape` (undo leading-batch broadcast)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a, b):
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        bt = np.swapaxes(bd, -1, -2)
        at = np.swapaxes(ad, -1, -2)
        ga = _reduce_to(g @ bt, ad.shape)
        gb = _reduce_to(at @ g, bd.shape)
        return (ga, gb)

    return _node(out, (a, b), bwd)


def add_bias(a, bias):
    """(..., d) + (d,)"""
    if bias.data.shape != a.data.shape[-1:]:
        raise ContractViolation("add_bias: bias must match last dim")
    nd = a.data.ndim

    def bwd(g):
        return (g, g.sum(axis=tuple(range(nd - 1))))

    return _node(a.data + bias.data, (a, bias), bwd)


def add_time_bias(x, t):
    """(B, C, H, W) + (B, C) broadcast over the spatial grid."""
    if x.data.shape[:2] != t.data.shape:
        raise ContractViolation("add_time_bias: (B, C) prefix mismatch")
    return _node(x.data + t.data[:, :, None, None], (x, t),
                 lambda g: (g, g.sum(axis=(2, 3))))


# ---------------------------------------------------------------------------
# fused layers
# ---------------------------------------------------------------------------

def softmax(a):
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis; gamma/beta shaped (d,)."""
    d = a.data.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * gamma.data + beta.data

    def bwd(g):
        axes = tuple(range(a.data.ndim - 1))
        dgamma = (g * xn).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xn * (gx * xn).mean(axis=-1, keepdims=True))
        return (dx, dgamma, dbeta)

    return _node(out, (a, gamma, beta), bwd)


def group_norm(a, gamma, beta, groups, eps=1e-5):
    """(B, C, H, W) normalized per (sample, channel-group)."""
    B, C, H, W = a.data.shape
    if C % groups:
        raise ContractViolation(f"group_norm: {C} channels not divisible by {groups}")
    xg = a.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = (xc * inv).reshape(B, C, H, W)
    out = xn * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bwd(g):
        dgamma = (g * xn).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = (g * gamma.data[None, :, None, None]).reshape(B, groups, -1)
        xng = xn.reshape(B, groups, -1)
        dx = inv * (gx - gx.mean(axis=2, keepdims=True)
                    - xng * (gx * xng).mean(axis=2, keepdims=True))
        return (dx.reshape(B, C, H, W), dgamma, dbeta)

    return _node(out, (a, gamma, beta), bwd)


def _im2col(xp, kh, kw, stride):
    sw = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    sw = sw[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    B, C, Ho, Wo = sw.shape[:4]
    cols = sw.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return np.ascontiguousarray(cols), Ho, Wo


def conv2d(x, w, b, stride=1, padding=1):
    """NCHW conv. w: (Cout, Cin, kh, kw), b: (Cout,)."""
    B, C, H, W = x.data.shape
    Cout, Cin, kh, kw = w.data.shape
    if Cin != C:
        raise ContractViolation(f"conv2d: input has {C} channels, kernel expects {Cin}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols, Ho, Wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(Cout, -1)
    y = cols @ wmat.T + b.data
    out = y.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    keep = [cols] if _GRAD_ENABLED and (x.requires_grad or w.requires_grad) else None

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, Cout)  # (B*Ho*Wo, Cout)
        dw = (gmat.T @ keep[0]).reshape(w.data.shape)
        keep[0] = None  # release after use
        db = gmat.sum(axis=0)
        dcols = gmat @ wmat  # (B*Ho*Wo, C*kh*kw)
        dcols = dcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        return (dx, dw, db)

    return _node(np.ascontiguousarray(out), (x, w, b), bwd)


def upsample2x(x):
    """Nearest-neighbour 2x upsample of (B, C, H, W)."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.data.shape

    def bwd(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), bwd)


def check_finite(a, what="tensor"):
    """Raise NumericFailure unless every value is finite. Returns the input."""
    if not np.isfinite(a.data if isinstance(a, Tensor) else a).all():
        raise NumericFailure(f"{what} contains NaN or Inf")
    return a
