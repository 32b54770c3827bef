"""Eager tensors with a taped reverse-mode graph.

Each differentiable op builds its output eagerly and stores a closure mapping
the output gradient to one gradient per parent. ``backward`` walks the graph
once in reverse topological order.

Broadcasting is deliberately narrow: scalars, and a trailing-dims operand
(bias add / per-feature scale). Anything else is a shape error.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import kernels

_state = threading.local()


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled():
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not isinstance(data, (np.ndarray, np.generic)) or not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    # -- graph -----------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def topo_order(root):
    """Return the graph reachable from ``root`` in a valid execution order."""
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype or get_default_dtype())


def _make(data, parents, backward, op):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


custom_op = _make


def parameter(data):
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


# -- elementwise --------------------------------------------------------

def _trailing(small, big):
    return small == big[len(big) - len(small):] if len(small) <= len(big) else False


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_broadcast(a, b, op):
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if _trailing(b.shape, a.shape) or _trailing(a.shape, b.shape):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbroadcast(g, shape):
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return _reduce_to(g, shape)


def add(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.data + np.asarray(b, dtype=a.dtype), (a,), lambda g: (g,), "add_scalar")
    a = as_tensor(a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b))
    a = as_tensor(a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = np.asarray(b, dtype=a.dtype)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def scale_rows(x, w):
    """``x[r, :] * w[r]`` for a (R, D) matrix and an (R,) weight vector."""
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: rows {x.shape} vs weights {w.shape}")
    xd, wd = x.data, w.data
    return _make(xd * wd[:, None], (x, w),
                 lambda g: (g * wd[:, None], (g * xd).sum(axis=1)), "scale_rows")


def exp(a):
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a):
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g * 0.5 / y,), "sqrt")


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    y, t = kernels.gelu_fwd(x)
    return _make(y, (a,), lambda g: (kernels.gelu_bwd(x, t, g),), "gelu")


# -- reductions and shape ----------------------------------------------

def tsum(a, axis=None):
    shape = a.shape
    y = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(y), (a,), backward, "sum")


def mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=()):
    axes = tuple(axes) or tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def expand(a, shape):
    """Broadcast ``a`` over new leading dimensions."""
    shape = tuple(shape)
    if not _trailing(a.shape, shape):
        raise ShapeError(f"expand: {a.shape} cannot broadcast to {shape}")
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_reduce_to(g, src),), "expand")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take(a, idx, axis=0):
    """Gather along ``axis``; duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    axis = axis % a.ndim

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        if idx.ndim == 0:
            # scalar index drops the axis; there are no duplicates to accumulate
            np.moveaxis(out, axis, 0)[idx] += g
        elif axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), backward, "take")


def gather_rows(a, idx):
    """Per-sample gather: ``a`` is (B, L, D), ``idx`` is (B, L'), output (B, L', D)."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: data {a.shape} with index {idx.shape}")
    b = np.arange(a.shape[0])[:, None]
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (np.broadcast_to(b, idx.shape), idx), g)
        return (out,)

    return _make(a.data[b, idx], (a,), backward, "gather_rows")


# -- linear algebra ----------------------------------------------------

def _mm(a, b):
    # Single-row products go through the gemm path so a row's result does not
    # depend on how many rows share the call.
    if a.ndim == 2 and a.shape[0] == 1:
        return np.matmul(np.concatenate([a, a]), b)[:1]
    return np.matmul(a, b)


def matmul(a, b):
    """Matrix product; batched when both operands share identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (_mm(g, np.swapaxes(bd, -1, -2)), _mm(np.swapaxes(ad, -1, -2), g))

    return _make(_mm(ad, bd), (a, b), backward, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` over the last dim of ``x`` (any leading shape)."""
    lead = x.shape[:-1]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))


# -- normalisation / probabilities --------------------------------------

def _rows(x):
    return x.reshape(-1, x.shape[-1])


def softmax(a, axis=-1):
    """Max-subtracted softmax along ``axis``; rejects non-finite inputs."""
    if not np.all(np.isfinite(a.data)):
        raise FloatingPointError("softmax: non-finite input")
    moved = axis not in (-1, a.ndim - 1)
    x = np.moveaxis(a.data, axis, -1) if moved else a.data
    y = kernels.softmax_fwd(_rows(x)).reshape(x.shape)

    def backward(g):
        gm = np.moveaxis(g, axis, -1) if moved else g
        dx = kernels.softmax_bwd(_rows(y), _rows(gm)).reshape(y.shape)
        return (np.moveaxis(dx, -1, axis) if moved else dx,)

    return _make(np.moveaxis(y, -1, axis) if moved else y, (a,), backward, "softmax")


def masked_softmax(a, valid):
    """Softmax over the last axis where ``valid`` is False gets exactly zero weight.

    ``valid`` broadcasts against ``a`` and may only vary along the leading
    axes and the last one (e.g. a (B, 1, 1, L) key mask for (B, H, L, L)
    scores); every row needs at least one valid entry.
    """
    valid = np.asarray(valid, dtype=bool)
    valid = valid.reshape((1,) * (a.ndim - valid.ndim) + valid.shape)
    if not valid.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no valid entries")
    if valid.all():
        y = kernels.softmax_fwd(_rows(a.data)).reshape(a.shape)
    else:
        # fold the broadcast axes into a row group so the mask is never materialised
        lead = 0
        while lead < a.ndim - 1 and valid.shape[lead] == a.shape[lead]:
            lead += 1
        if any(s != 1 for s in valid.shape[lead:-1]):
            valid = np.broadcast_to(valid, a.shape)
            lead = a.ndim - 1
        keys = np.broadcast_to(valid, a.shape[:lead] + valid.shape[lead:]).reshape(-1, a.shape[-1])
        group = int(np.prod(a.shape[lead:-1], dtype=np.int64))
        y = kernels.masked_softmax_fwd(_rows(a.data), np.ascontiguousarray(keys), group).reshape(a.shape)

    def backward(g):
        return (kernels.softmax_bwd(_rows(y), _rows(g)).reshape(y.shape),)

    return _make(y, (a,), backward, "masked_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last dim {d}")
    y, xhat, rstd = kernels.layernorm_fwd(_rows(x.data), gamma.data, beta.data, eps)

    def backward(g):
        dx, dg, db = kernels.layernorm_bwd(_rows(g), xhat, rstd, gamma.data)
        return dx.reshape(x.shape), dg, db

    return _make(y.reshape(x.shape), (x, gamma, beta), backward, "layer_norm")


def l2_normalize(a, eps=1e-12):
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    y = x / n

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _make(y, (a,), backward, "l2_normalize")


def dropout(a, p, rng):
    if p <= 0.0 or not grad_enabled():
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- losses ------------------------------------------------------------

def cross_entropy(logits, target):
    """Mean of ``-log softmax(logits)[target]`` over rows.

    Accepts a single logit vector with an int target, or (M, V) logits with M targets.
    """
    single = logits.ndim == 1
    x = logits.data[None] if single else logits.data
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    v = x.shape[1]
    if t.shape != (x.shape[0],):
        raise ShapeError(f"cross_entropy: {x.shape[0]} rows but {t.shape} targets")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"cross_entropy: target out of range for vocabulary of {v}")
    losses, probs = kernels.cross_entropy_fwd(x, t)
    m = x.shape[0]

    def backward(g):
        d = probs.copy()
        d[np.arange(m), t] -= 1.0
        d *= g / m
        return (d[0] if single else d,)

    return _make(np.asarray(losses.mean(), dtype=x.dtype), (logits,), backward, "cross_entropy")


def mse(pred, target):
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _make(np.asarray((diff * diff).mean(), dtype=diff.dtype), (pred, target), backward, "mse")
