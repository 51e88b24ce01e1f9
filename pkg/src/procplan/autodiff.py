"""Reverse-mode autodiff over float64 numpy arrays, limited to what the model needs.

Each op returns a new `Tensor` holding its parents and a closure that pushes the
output gradient back into them. Gradients are accumulated in a single fixed
order (reverse topological), so repeated runs are bit-identical.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _shape_err(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------- #
# primitives

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), back)


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_err(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("hadamard", a, b)
    A, B = a.data, b.data

    def back(g):
        return (_unbroadcast(g * B, a.shape) if a.requires_grad else None,
                _unbroadcast(g * A, b.shape) if b.requires_grad else None)

    return _make(A * B, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def one_minus(a) -> Tensor:
    a = as_tensor(a)
    return _make(1.0 - a.data, (a,), lambda g: (-g,))


def softmax_rows(a, mask=None) -> Tensor:
    """Row softmax; `mask` is a boolean array, False entries get probability 0."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        if mask.shape != x.shape:
            raise _shape_err("softmax_rows mask", x.shape, mask.shape)
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), back)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return _make(y, (a,), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise _shape_err("layer_norm", x.shape, gamma.shape)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data

    def back(g):
        n = X.shape[-1]
        gx = g * G
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, (g * xhat).reshape(-1, n).sum(axis=0), g.reshape(-1, n).sum(axis=0)

    return _make(xhat * G + beta.data, (x, gamma, beta), back)


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: id out of range for table {table.shape}")

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(data, tuple(tensors), back)


def slice_(a, index) -> Tensor:
    """Basic-slicing view (rows, columns, or both) with scatter-back gradient."""
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return _make(a.data[index].copy(), (a,), back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def normalize_cols(a, eps: float = 1e-12) -> Tensor:
    """Divide each column by its sum (columns of non-negative weights)."""
    a = as_tensor(a)
    A = a.data
    s = A.sum(axis=0, keepdims=True) + eps
    y = A / s

    def back(g):
        return ((g - (g * y).sum(axis=0, keepdims=True)) / s,)

    return _make(y, (a,), back)


def sum_squares(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _make(np.asarray((A * A).sum()), (a,), lambda g: (2.0 * g * A,))


def cross_entropy(logits, targets) -> Tensor:
    """Mean token negative log-likelihood over rows of `logits`."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise _shape_err("cross_entropy", logits.shape, targets.shape)
    Z = logits.data
    zmax = Z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(Z - zmax).sum(axis=1))
    n = len(targets)
    nll = lse - Z[np.arange(n), targets]
    p = np.exp(Z - lse[:, None])

    def back(g):
        d = p.copy()
        d[np.arange(n), targets] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(nll.mean()), (logits,), back)


def total(*terms) -> Tensor:
    """Sum of scalar tensors."""
    out = as_tensor(terms[0])
    for t in terms[1:]:
        out = add(out, t)
    return out


# --------------------------------------------------------------------------- #
# gradient checking

def finite_difference_check(f, params, h: float = 1e-5, max_coords: int = 256, seed: int = 0,
                            floor: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `f` is a zero-argument callable returning a scalar Tensor built from `params`.
    Tensors with more than `max_coords` entries are checked on a random sample.
    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). The floor sits
    above the central-difference roundoff (~1e-16 |f| / h), below which a
    relative comparison measures noise rather than the gradient.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        gflat = ga.reshape(-1)
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            with no_grad():
                fp = f().item()
            flat[i] = old - h
            with no_grad():
                fm = f().item()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
