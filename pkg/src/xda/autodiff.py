"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

Only the operations the segmentation model and its losses need are provided.
Graphs are rebuilt on every forward pass; ``backward`` walks the nodes
reachable from a scalar loss in reverse creation order and sums gradients
over repeated uses.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

from xda import kernels

PROB_EPS = 1e-8

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """An operation received non-finite input."""


class DomainError(ValueError):
    """An operand lies outside the mathematical domain of the operation."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self.name = name

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other))


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _node(data, parents, backward_fn):
    """Wrap ``data`` as the output of an op.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b):
    a, b = _pair(a, b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _pair(a, b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _pair(a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold the batch into rows
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw)


def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x, idx):
    """Gather along the leading axis; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.intp)

    unique = len(np.unique(idx)) == len(idx)

    def bw(g):
        out = np.zeros_like(x.data)
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), bw)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def relu(x):
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


def stop_gradient(x):
    """Identity in the forward pass; contributes nothing to gradients.

    While ``grad_check`` is probing a function, values passing through here
    are recorded on the first evaluation and replayed afterwards, so the
    finite differences see the same severed graph that ``backward`` sees.
    """
    data = x.data
    if _tape.mode == "record":
        _tape.values.append(data.copy())
    elif _tape.mode == "replay":
        data = _tape.values[_tape.pos]
        _tape.pos += 1
    return Tensor(data)


# ---------------------------------------------------------------------------
# fused ops


def softmax_rows(x, scale=1.0):
    """Softmax over the last axis of ``scale * x``, max-stabilised."""
    if x.shape[-1] < 1:
        raise ShapeError(f"softmax over an empty axis: {x.shape}")
    if not scale > 0:
        raise DomainError(f"softmax scale must be positive, got {scale}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows received non-finite logits")
    y = kernels.softmax_fwd(x.data, scale)
    return _node(y, (x,), lambda g: (kernels.softmax_bwd(y, g, scale),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then apply an affine map."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} do not match {x.shape}")
    out, xhat, rstd = kernels.layernorm_fwd(x.data, gamma.data, beta.data, eps)

    def bw(g):
        gx, dgamma, dbeta = kernels.layernorm_bwd(g, xhat, rstd, gamma.data)
        return gx.reshape(x.shape), dgamma, dbeta

    return _node(out, (x, gamma, beta), bw)


def cross_entropy(logits, target, weight=None):
    """Weighted pixel cross-entropy, averaged over non-ignored pixels.

    ``logits`` and ``target`` are (P, C); a target row of zeros marks an
    ignored pixel. ``weight`` is (P,) with entries in [0, 1]. The loss is
    computed from a stable log-softmax, so no probability clamp is needed.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if logits.ndim != 2 or target.shape != logits.shape:
        raise ShapeError(f"cross_entropy shapes: logits {logits.shape}, target {target.shape}")
    n_pix = logits.shape[0]
    if weight is None:
        weight = np.ones(n_pix)
    weight = np.asarray(weight.data if isinstance(weight, Tensor) else weight)
    if weight.shape != (n_pix,):
        raise ShapeError(f"cross_entropy weight shape {weight.shape}, expected ({n_pix},)")
    if weight.size and (weight.min() < 0 or weight.max() > 1):
        raise DomainError("cross_entropy weights must lie in [0, 1]")
    count = int(np.count_nonzero(target.any(axis=1)))
    if count == 0:
        return _node(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))
    total, grad = kernels.log_softmax_ce(logits.data, target, weight)
    norm = 1.0 / count
    return _node(
        np.asarray(total * norm, dtype=logits.dtype),
        (logits,),
        lambda g: ((grad * (g * norm)).astype(logits.dtype, copy=False),),
    )


def kl_rows(p, q, eps=PROB_EPS):
    """Elementwise ``p * log(p / q)`` along rows; gradients reach ``q`` only.

    Both arguments must hold probability rows. Summing the result over the
    last axis gives KL(p || q).
    """
    pd = np.asarray(p.data if isinstance(p, Tensor) else p)
    q = as_tensor(q)
    if pd.shape != q.shape:
        raise ShapeError(f"kl_rows shapes differ: {pd.shape} vs {q.shape}")
    if (pd < 0).any() or (q.data < 0).any():
        raise DomainError("kl_rows needs non-negative probability rows")
    tol = 1e-6 if q.dtype == np.float64 else 1e-4
    for arr, nm in ((pd, "p"), (q.data, "q")):
        if arr.size and np.abs(arr.sum(axis=-1) - 1.0).max() > tol:
            raise DomainError(f"kl_rows: rows of {nm} do not sum to 1")
    terms = kernels.kl_terms(pd, q.data, eps)
    return _node(terms, (q,), lambda g: (kernels.kl_grad_q(pd, q.data, g, eps),))


def bilinear_weights(n_in, n_out, dtype=np.float64):
    """(n_out, n_in) interpolation matrix, half-pixel (align-corners-false) convention."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"bilinear resize needs positive sizes, got {n_in} -> {n_out}")
    w = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        w[i, i0] += 1.0 - lam
        w[i, i1] += lam
    return w


def bilinear_resize(x, h2, w2):
    """Resize (..., h, w, c) to (..., h2, w2, c)."""
    if x.ndim < 3:
        raise ShapeError(f"bilinear_resize expects (..., h, w, c), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got ({h2}, {w2})")
    if (h, w) == (h2, w2):
        return _node(x.data.copy(), (x,), lambda g: (g,))
    rh = bilinear_weights(h, h2, x.dtype)
    rw = bilinear_weights(w, w2, x.dtype)
    lead, c = x.shape[:-3], x.shape[-1]
    # explicit matmuls rather than an optimized einsum, whose contraction
    # layout (and so its rounding) varies with the interpreter's hash seed
    rows = rh @ x.data.reshape(*lead, h, w * c)
    out = rw @ rows.reshape(*lead, h2, w, c)

    def bw(g):
        cols = rw.T @ g
        return ((rh.T @ cols.reshape(*lead, h2, w * c)).reshape(*lead, h, w, c),)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass


def _topo(root):
    seen = set()
    order = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    order.sort(key=lambda t: t._id, reverse=True)
    return order


def backward(loss):
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for node in _topo(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# finite-difference checking


class _Tape:
    def __init__(self):
        self.mode = None
        self.values = []
        self.pos = 0


_tape = _Tape()


@contextlib.contextmanager
def _tape_mode(mode):
    prev = (_tape.mode, _tape.pos)
    _tape.mode = mode
    _tape.pos = 0
    try:
        yield
    finally:
        _tape.mode, _tape.pos = prev


def grad_check(f, inputs, eps=1e-6, floor=1e-4, sever=True):
    """Max relative error between backward gradients and central differences.

    ``f`` maps the ``inputs`` tensors to a scalar tensor. The per-coordinate
    error is ``|a - n| / max(|a|, |n|, floor)``. With ``sever`` the
    finite-difference evaluations replay every ``stop_gradient`` value from
    the unperturbed pass. NaN anywhere makes the result NaN.
    """
    for x in inputs:
        x.grad = None
    _tape.values = []
    with _tape_mode("record" if sever else None):
        out = f(*inputs)
    backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    worst = 0.0
    with _tape_mode("replay" if sever else None), no_grad():
        for x, a in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            num = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                _tape.pos = 0
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                _tape.pos = 0
                fm = float(f(*inputs).data)
                flat[i] = orig
                num[i] = (fp - fm) / (2 * eps)
            a = a.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            err = np.abs(a - num) / denom
            if np.isnan(err).any():
                return float("nan")
            if err.size:
                worst = max(worst, float(err.max()))
    _tape.values = []
    return worst
