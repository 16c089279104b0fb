"""Taped reverse-mode differentiation over numpy arrays, plus a finite-difference checker.

Only the handful of operations the trainer needs are supported. Every op
records its parents and a closure that pushes ``out.grad`` back to them.
"""
from dataclasses import dataclass, field

import numpy as np


class GraphError(RuntimeError):
    pass


def _unbroadcast(grad, shape):
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name="", _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(lift(other)))

    def __rsub__(self, other):
        return add(lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else ())
    if needs:
        out._backward = backward_fn
    return out


def add(a, b):
    a, b = lift(a), lift(b)
    out = None

    def bw():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    out = _node(a.data + b.data, (a, b), bw)
    return out


def neg(a):
    out = None

    def bw():
        a._accumulate(-out.grad)

    out = _node(-a.data, (a,), bw)
    return out


def mul(a, b):
    a, b = lift(a), lift(b)
    out = None

    def bw():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out = _node(a.data * b.data, (a, b), bw)
    return out


def div(a, b):
    a, b = lift(a), lift(b)
    out = None

    def bw():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out = _node(a.data / b.data, (a, b), bw)
    return out


def power(a, p):
    if isinstance(p, Tensor):
        raise TypeError("only constant exponents are supported")
    p = float(p)
    out = None

    def bw():
        a._accumulate(out.grad * p * a.data ** (p - 1.0))

    out = _node(a.data**p, (a,), bw)
    return out


def matmul(a, b):
    a, b = lift(a), lift(b)
    out = None

    def bw():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out = _node(a.data @ b.data, (a, b), bw)
    return out


def transpose(a):
    out = None

    def bw():
        a._accumulate(out.grad.T)

    out = _node(a.data.T, (a,), bw)
    return out


def tanh(a):
    a = lift(a)
    y = np.tanh(a.data)
    out = None

    def bw():
        a._accumulate(out.grad * (1.0 - y * y))

    out = _node(y, (a,), bw)
    return out


def exp(a):
    a = lift(a)
    y = np.exp(a.data)
    out = None

    def bw():
        a._accumulate(out.grad * y)

    out = _node(y, (a,), bw)
    return out


def log(a):
    a = lift(a)
    out = None

    def bw():
        a._accumulate(out.grad / a.data)

    out = _node(np.log(a.data), (a,), bw)
    return out


def sqrt(a):
    a = lift(a)
    y = np.sqrt(a.data)
    out = None

    def bw():
        a._accumulate(out.grad * 0.5 / y)

    out = _node(y, (a,), bw)
    return out


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` for a constant floor; gradient passes where ``a > floor``."""
    a = lift(a)
    keep = a.data > floor
    out = None

    def bw():
        a._accumulate(out.grad * keep)

    out = _node(np.where(keep, a.data, floor), (a,), bw)
    return out


def tsum(a, axis=None, keepdims=False):
    a = lift(a)
    out = None

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    out = _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)
    return out


def mean(a, axis=None, keepdims=False):
    a = lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def concat(tensors, axis=1):
    tensors = [lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = None

    def bw():
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(g)

    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)
    return out


def take_diagonal(a):
    a = lift(a)
    n = a.shape[0]
    out = None

    def bw():
        g = np.zeros(a.shape)
        g[np.arange(n), np.arange(n)] = out.grad
        a._accumulate(g)

    out = _node(np.diagonal(a.data).copy(), (a,), bw)
    return out


def logsumexp(a, axis=-1, keepdims=False):
    """Max-shifted log-sum-exp; the shift is treated as a constant."""
    a = lift(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = m + np.log(s)
    soft = e / s
    out = None

    def bw():
        g = out.grad if keepdims else np.expand_dims(out.grad, axis)
        a._accumulate(g * soft)

    out = _node(y if keepdims else np.squeeze(y, axis=axis), (a,), bw)
    return out


def log_softmax(a, axis=-1):
    return a - logsumexp(a, axis=axis, keepdims=True)


def l2_normalize_rows(a):
    a = lift(a)
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding")
    return a / sqrt(tsum(a * a, axis=1, keepdims=True))


def cosine_matrix(a, b):
    return l2_normalize_rows(a) @ l2_normalize_rows(b).T


# backward -------------------------------------------------------------------


def _topological(root):
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            state[id(node)] = 2
            order.append(node)
            continue
        mark = state.get(id(node), 0)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in computation graph")
        state[id(node)] = 1
        stack.append((node, True))
        for p in node._parents:
            pm = state.get(id(p), 0)
            if pm == 1:
                raise GraphError("cycle detected in computation graph")
            if pm == 0 and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Fill ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        if node is not loss:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


# gradient check -------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_parameter: dict = field(default_factory=dict)

    def __str__(self):
        rows = ", ".join(f"{k}={v:.2e}" for k, v in self.per_parameter.items())
        return f"max_rel_err={self.max_rel_err:.3e} ({rows})"


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return np.abs(analytic - numeric) / denom


def grad_check(build_loss, params, h=1e-4, max_entries=None, rng=None):
    """Compare reverse-mode gradients to central differences.

    ``build_loss`` maps a dict of name -> Tensor to a scalar Tensor and must be
    deterministic (fix any noise outside it). Parameters with more than
    ``max_entries`` entries are checked on a random subsample.
    """
    arrays = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    loss = build_loss(leaves)
    backward(loss)
    rng = np.random.default_rng(0) if rng is None else rng

    def value(k, idx, delta):
        trial = {n: Tensor(a) for n, a in arrays.items()}
        bumped = arrays[k].copy()
        bumped[idx] += delta
        trial[k] = Tensor(bumped)
        return build_loss(trial).item()

    report = GradCheckReport(max_rel_err=0.0)
    for k, arr in arrays.items():
        analytic = leaves[k].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        flat = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        worst = 0.0
        for f in flat:
            idx = np.unravel_index(f, arr.shape)
            numeric = (value(k, idx, h) - value(k, idx, -h)) / (2.0 * h)
            worst = max(worst, float(rel_err(analytic[idx], numeric)))
        report.per_parameter[k] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
