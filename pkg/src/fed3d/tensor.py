"""Dense float64 tensors with a reverse-mode gradient tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the upstream gradient into them. ``backward`` walks the
record in reverse topological order. Nodes that do not require a gradient are
pruned from the record at construction time, so a frozen backbone costs no
backward work beyond what is needed to reach trainable leaves.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


class Parameter(Tensor):
    """A leaf tensor whose gradient is kept between passes.

    ``grad`` is always allocated with the value's shape. A parameter with
    ``trainable=False`` never enters the gradient record, so its gradient
    stays exactly zero.
    """

    __slots__ = ("name",)

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(data, requires_grad=trainable)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def gradient(self) -> np.ndarray:
        return self.grad

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    return Tensor(data, True, live, backward_fn)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Propagate gradients from ``root`` into every reachable trainable leaf."""
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
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
            if id(p) not in seen:
                stack.append((p, False))

    seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
    _accumulate(root, seed)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior gradients are not needed once consumed
            if not isinstance(node, Parameter):
                node.grad = None


# ---------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def _back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), _back)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def _back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), _back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def _back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), _back)


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(old)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: _accumulate(a, np.transpose(g, inv)))


def swap_last(a: Tensor) -> Tensor:
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: _accumulate(a, np.swapaxes(g, -1, -2)))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _node(np.broadcast_to(a.data, shape), (a,), lambda g: _accumulate(a, _unbroadcast(g, a.shape)))


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in items], axis=axis)

    def _back(g):
        for i, t in enumerate(items):
            if t.requires_grad:
                _accumulate(t, np.take(g, i, axis=axis))

    return _node(out, tuple(items), _back)


def concat(items: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in items], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in items])

    def _back(g):
        for t, lo, hi in zip(items, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _node(out, tuple(items), _back)


def sum_all(a: Tensor) -> Tensor:
    return _node(a.data.sum(), (a,), lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


def mean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = a.data.mean(axis=axis)

    def _back(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.shape))

    return _node(out, (a,), _back)


def max_pool(a: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient flows to the first arg-max."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def _back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(a, full)

    return _node(out, (a,), _back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: _accumulate(a, g * mask))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated Gaussian error linear unit."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def _back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner))

    return _node(out, (a,), _back)


def softmax_array(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(t: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    t = _wrap(t)
    if t.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    s = softmax_array(t.data)

    def _back(g):
        _accumulate(t, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (t,), _back)


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= n_classes))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label {int(labels[i])} of sample {i} outside [0, {n_classes})")
    return labels


def per_sample_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Per-sample ``-log softmax(logits)[label]`` and the true-class probabilities.

    The probabilities are read from the forward pass; they are what the
    imbalance correction needs and are never differentiated.
    """
    b, o = logits.shape
    labels = _check_labels(labels, o)
    rows = np.arange(b)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[rows, labels] - logsum
    probs = softmax_array(logits.data)
    true_prob = probs[rows, labels]

    def _back(g):
        d = probs * g[:, None]
        d[rows, labels] -= g
        _accumulate(logits, d)

    return _node(-logp, (logits,), _back), true_prob


def weighted_mean(values: Tensor, weights) -> Tensor:
    """``(1/B) * sum(w_i * v_i)`` with the weights held constant."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != values.shape:
        raise ShapeError(f"weights {w.shape} do not match values {values.shape}")
    n = values.shape[0]
    return _node((w * values.data).sum() / n, (values,), lambda g: _accumulate(values, g * w / n))


def cross_entropy(logits: Tensor, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, grad, true_class_prob)`` where ``grad`` is the gradient of
    the mean loss w.r.t. the logits, ``(softmax - onehot) / B``.
    """
    logits = _wrap(logits)
    b, o = logits.shape
    labels = _check_labels(labels, o)
    probs = softmax_array(logits.data)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z[np.arange(b), labels] - np.log(np.exp(z).sum(axis=1))
    grad = probs.copy()
    grad[np.arange(b), labels] -= 1.0
    return float(-logp.mean()), grad / b, probs[np.arange(b), labels]


# ---------------------------------------------------------------- checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Elementwise ``|a - n| / (|a| + |n|)``; ``floor`` bounds the denominator below.

    A floor near the finite-difference resolution keeps entries whose true
    gradient is below roundoff from reporting spurious O(1) errors.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(err.max())


def finite_diff_check(fn: Callable[[Tensor], Tensor], at, eps: float = 1e-5, floor: float = 1e-12) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = Tensor(np.array(at, dtype=np.float64), requires_grad=True)
    out = fn(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    base = np.array(at, dtype=np.float64)
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = float(fn(Tensor(base)).data)
        flat[i] = keep - eps
        lo = float(fn(Tensor(base)).data)
        flat[i] = keep
        numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return relative_error(analytic, numeric, floor)


def param_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
                     floor: float = 1e-12) -> float:
    """Same check as :func:`finite_diff_check` but over parameters in place."""
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        if not p.trainable:
            continue
        analytic = p.grad.copy()
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(loss_fn().data)
            flat[i] = keep - eps
            lo = float(loss_fn().data)
            flat[i] = keep
            numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst
