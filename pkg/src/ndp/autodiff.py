"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs depend on a trainable
leaf. ``Tape.backward`` walks that record in reverse creation order, so the
tape itself is the topological order and no graph search is needed.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    x = tape.const(np.arange(6.0).reshape(2, 3))
    loss = ad.mean(ad.tanh(x @ w))
    grads = tape.backward(loss)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class SamplingError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "tape", "requires_grad", "trainable", "parents", "backward_fn", "name")

    def __init__(self, value, tape: "Tape", requires_grad=False, parents=(), backward_fn=None,
                 trainable=False, name=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.trainable = trainable
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def leaf(self, value, trainable: bool = True, name: str | None = None) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), self, requires_grad=trainable,
                   trainable=trainable, name=name)
        self.leaves.append(t)
        return t

    def const(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` and return grads of trainable leaves."""
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        for leaf in self.leaves:
            leaf.grad = None
        loss.grad = np.ones_like(loss.value)
        stop = self.nodes.index(loss) if loss.backward_fn is not None else -1
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        return {
            leaf: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for leaf in self.leaves
            if leaf.trainable
        }


def _as_tensor(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise ContractError("operation needs at least one Tensor argument")


def _op(value, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = parents[0].tape
    requires = any(p.requires_grad for p in parents)
    out = Tensor(value, tape, requires_grad=requires, parents=tuple(parents),
                 backward_fn=backward_fn if requires else None)
    if requires:
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, name: str):
    try:
        return np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.value.shape} and {b.value.shape}") from None


# ------------------------------------------------------------------ arithmetic
def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _broadcast_check(a, b, "add")
    sa, sb = a.value.shape, b.value.shape
    return _op(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _broadcast_check(a, b, "sub")
    sa, sb = a.value.shape, b.value.shape
    return _op(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _broadcast_check(a, b, "mul")
    av, bv = a.value, b.value
    return _op(av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _op(x.value * c, (x,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    return _op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(x: Tensor) -> Tensor:
    return _op(x.value.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.value.shape
    return _op(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_as_tensor(x, tape) for x in xs]
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        shapes = " and ".join(str(x.value.shape) for x in xs)
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}") from None
    bounds = np.cumsum([x.value.shape[axis] for x in xs])[:-1]
    return _op(value, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- elementwise
def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _op(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _op(x.value * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _op(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return _op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    v = x.value
    return _op(np.log(v), (x,), lambda g: (g / v,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.value >= lo) & (x.value <= hi)
    return _op(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _broadcast_check(a, b, "minimum")
    take_a = a.value <= b.value
    sa, sb = a.value.shape, b.value.shape
    return _op(np.where(take_a, a.value, b.value), (a, b),
               lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)))


# ----------------------------------------------------------------- reductions
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.value.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _op(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), back)


def sum_rows(x: Tensor) -> Tensor:
    """Add the rows together: ``(n, m) -> (1, m)``."""
    return sum(x, axis=0, keepdims=True)


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.value.size)


# ------------------------------------------------------------------- indexing
def gather_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    shape = x.value.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _op(x.value[index], (x,), back)


def scatter_add_rows(x: Tensor, index, n_rows: int) -> Tensor:
    """``out[index[i]] += x[i]`` into a fresh ``(n_rows, ...)`` array."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != x.value.shape[0]:
        raise ShapeError(f"scatter_add_rows: index shape {index.shape} vs values {x.value.shape}")
    out = np.zeros((n_rows,) + x.value.shape[1:])
    np.add.at(out, index, x.value)
    return _op(out, (x,), lambda g: (g[index],))


def pick(x: Tensor, index) -> Tensor:
    """Per-row column selection: ``out[i] = x[i, index[i]]``."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.value.shape[0])
    shape = x.value.shape

    def back(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _op(x.value[rows, index], (x,), back)


# --------------------------------------------------------------------- losses
def log_softmax(x: Tensor) -> Tensor:
    v = x.value
    shifted = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _op(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.value.ndim != 2 or targets.shape != (logits.value.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.value.shape} vs targets {targets.shape}")
    return scale(sum(pick(log_softmax(logits), targets)), -1.0 / targets.shape[0])


def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred.tape)
    if pred.value.shape != target.value.shape:
        raise ShapeError(f"mse: incompatible shapes {pred.value.shape} and {target.value.shape}")
    return mean(mul(sub(pred, target), sub(pred, target)))


# ------------------------------------------------------------------- sampling
def sample_categorical(probs, rng: np.random.Generator) -> int:
    """Draw an index proportionally to ``probs``; records nothing on the tape."""
    p = np.asarray(probs.value if isinstance(probs, Tensor) else probs, dtype=float).reshape(-1)
    if (p < 0).any() or not np.isfinite(p).all():
        raise SamplingError("probabilities must be finite and non-negative")
    total = p.sum()
    if total <= 0:
        raise SamplingError("probabilities sum to zero")
    cdf = np.cumsum(p / total)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, int(np.flatnonzero(p)[-1]))


# ----------------------------------------------------------------------- adam
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """Bias-corrected Adam update applied in place to ``params``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
