"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient. Outside a tape every op is plain numpy, which keeps
inference paths (fixed-point inversion, grid densities, data generation) cheap.

    with Tape() as tape:
        loss = ((net(x) - y) ** 2).mean()
    grads = backward(tape, loss)
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "vjp",
    "as_tensor",
    "concat",
    "stack",
    "where",
    "logsumexp",
    "expm",
]

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as they are created, so the list is already in
    topological order. Tapes may be nested; an op records onto the innermost.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ids: set[int] = set()

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, node: "Tensor"):
        self.nodes.append(node)
        self._ids.add(id(node))

    def __contains__(self, node):
        return id(node) in self._ids

    def __len__(self):
        return len(self.nodes)


def _check_finite(data):
    if not np.isfinite(data).all():
        raise FloatingPointError("non-finite values produced in tensor operation")


class Tensor:
    """Immutable float64 array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = _parents
        self.backward_fn = _backward
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms of unary ops -------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def elu(self):
        return elu(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def abs(self):
        return absolute(self)

    def sqrt(self):
        return power(self, 0.5)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        _ACTIVE.append(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _make(data, parents, backward_fn):
    """Create an op output and record it if any parent is differentiable."""
    needs = bool(_ACTIVE) and _ACTIVE[-1] is not None and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    _ACTIVE[-1].record(out)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float):
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    p = float(exponent)
    out = a.data**p

    def bw(g):
        if p == 2.0:
            return (2.0 * a.data * g,)
        return (p * a.data ** (p - 1.0) * g,)

    return _make(out, (a,), bw)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _make(np.where(mask, a.data, b.data), (a, b), bw)


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _make(np.where(cond, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),))


def elu(a):
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return _make(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + 1.0),))


def sin(a):
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def absolute(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = np.log(tot) + m
    soft = s / tot
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out, (a,), bw)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    if isinstance(index, Tensor):
        index = index.data.astype(int)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.einsum("...i,...ij->j", g, ad) if ad.ndim > 2 else ad.T @ g
            return _unbroadcast(ga, ad.shape), gb
        if ad.ndim == 1:
            ga = np.einsum("...j,...ij->i", g, bd) if bd.ndim > 2 else bd @ g
            gb = np.multiply.outer(ad, g)
            return ga, _unbroadcast(gb, bd.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(a.data @ b.data, (a, b), bw)


def expm(a):
    """Matrix exponential over the last two axes, differentiable.

    The adjoint uses the block-triangular identity
    ``expm([[X, E], [0, X]])[:d, d:] = L(X, E)`` with ``X = A^T``.
    """
    from .linalg import matrix_exp

    a = as_tensor(a)
    out = matrix_exp(a.data)

    def bw(g):
        d = a.shape[-1]
        xt = np.swapaxes(a.data, -1, -2)
        block = np.zeros(a.shape[:-2] + (2 * d, 2 * d))
        block[..., :d, :d] = xt
        block[..., d:, d:] = xt
        block[..., :d, d:] = g
        return (matrix_exp(block)[..., :d, d:],)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------


def backward(tape: Tape, output: Tensor, params=None) -> dict:
    """Return ``{param: d output / d param}`` for every leaf recorded on ``tape``.

    ``params`` restricts (and orders) the result; parameters that do not
    influence ``output`` receive zero gradients.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    return vjp(tape, output, np.ones_like(output.data), params)


def vjp(tape: Tape, output: Tensor, seed, params=None) -> dict:
    """Vector-Jacobian product: gradients of ``sum(seed * output)``.

    The tape can be swept any number of times with different seeds.
    """
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ValueError(f"seed shape {seed.shape} does not match output {output.shape}")
    if output not in tape:
        if output.requires_grad and output.backward_fn is None:
            return _select({output: seed}, params)
        raise ValueError("output tensor was not recorded on this tape")

    grads = {id(output): seed}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if parent.backward_fn is None:
                leaves[key] = parent
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {leaves[k]: grads[k] for k in leaves}
    return _select(result, params)


def _select(grads, params):
    if params is None:
        return grads
    return {p: grads.get(p, np.zeros_like(p.data)) for p in params}
