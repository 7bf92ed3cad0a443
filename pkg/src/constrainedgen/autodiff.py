"""Reverse-mode automatic differentiation over dense numpy arrays.

The primitive set is deliberately closed: affine map, elementwise
add / multiply / negate, exp, ln, tanh, softplus, sum-reduce,
elementwise max / min of two arguments, and broadcast. Both the score
network and compiled logical constraints lower to these primitives, so
each backward rule stays small and individually testable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "DiffGraph",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "ln",
    "tanh",
    "softplus",
    "sigmoid",
    "affine",
    "sum_reduce",
    "maximum",
    "minimum",
    "broadcast_to",
    "grad_check",
]


class Tensor:
    """A value on the differentiation tape.

    Holds the forward value, the accumulated adjoint after a backward
    pass, and the vector-Jacobian products linking it to its parents.
    """

    __slots__ = ("value", "grad", "parents", "vjps", "name")

    def __init__(self, value, parents=(), vjps=(), name=None):
        self.value = np.asarray(value, dtype=np.float64) if not isinstance(value, np.ndarray) else value
        self.grad = None
        self.parents = parents
        self.vjps = vjps
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    # Operator sugar. Subtraction and division by a constant lower to the
    # primitive set (add/neg, mul by reciprocal).
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def backward(self, seed=None):
        """Accumulate adjoints into every tensor reachable from self.

        ``seed`` defaults to ones and must match the shape of ``value``.
        """
        if seed is None:
            seed = np.ones_like(self.value)
        seed = np.asarray(seed, dtype=self.value.dtype)
        if seed.shape != self.value.shape:
            raise ValueError(f"seed shape {seed.shape} != root shape {self.value.shape}")
        order = _topo_order(self)
        for t in order:
            t.grad = np.zeros_like(t.value)
        self.grad = self.grad + seed
        for t in reversed(order):
            if not t.parents:
                continue
            g = t.grad
            for parent, vjp in zip(t.parents, t.vjps):
                parent.grad = parent.grad + vjp(g)


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- primitives -----------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.value + b.value,
        parents=(a, b),
        vjps=(lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(g, b.value.shape)),
    )


def neg(a):
    a = _as_tensor(a)
    return Tensor(-a.value, parents=(a,), vjps=(lambda g: -g,))


def sub(a, b):
    return add(a, neg(_as_tensor(b)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.value * b.value,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * out,))


def ln(a):
    a = _as_tensor(a)
    return Tensor(np.log(a.value), parents=(a,), vjps=(lambda g: g / a.value,))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.value)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * (1.0 - out * out),))


def _sigmoid(x):
    # exp(-softplus(-x)): stable on both tails
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a):
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.value)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * _sigmoid(a.value),))


def sigmoid(a):
    """Composite of the primitive set: exp(-softplus(-x))."""
    return exp(neg(softplus(neg(a))))


def affine(x, w, b=None):
    """x @ w (+ b). x is (batch, in) or (in,); w is (in, out)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.value.shape[-1] != w.value.shape[0]:
        raise ValueError(f"affine shape mismatch: x {x.value.shape} @ w {w.value.shape}")
    y = x.value @ w.value

    def vjp_x(g):
        return g @ w.value.T

    def vjp_w(g):
        if x.value.ndim == 1:
            return np.outer(x.value, g)
        return x.value.T @ g

    out = Tensor(y, parents=(x, w), vjps=(vjp_x, vjp_w))
    if b is not None:
        out = add(out, _as_tensor(b))
    return out


def sum_reduce(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).copy()

    return Tensor(out, parents=(a,), vjps=(vjp,))


def maximum(a, b):
    """Elementwise max; the full gradient goes to the selected argument.

    Ties select the first argument.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.value >= b.value
    out = np.where(take_a, a.value, b.value)
    return Tensor(
        out,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * take_a, a.value.shape),
            lambda g: _unbroadcast(g * ~take_a, b.value.shape),
        ),
    )


def minimum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.value <= b.value
    out = np.where(take_a, a.value, b.value)
    return Tensor(
        out,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * take_a, a.value.shape),
            lambda g: _unbroadcast(g * ~take_a, b.value.shape),
        ),
    )


def broadcast_to(a, shape):
    a = _as_tensor(a)
    out = np.broadcast_to(a.value, shape)
    return Tensor(out, parents=(a,), vjps=(lambda g: _unbroadcast(g, a.value.shape),))


def select_columns(x, idx):
    """Column gather from a (batch, d) array: a sparse affine map.

    Equivalent to x @ E where E is the 0/1 selection matrix; implemented
    as a slice with scatter-add backward for speed.
    """
    x = _as_tensor(x)
    idx = np.atleast_1d(np.asarray(idx, dtype=int))
    out = x.value[..., idx]

    def vjp(g):
        full = np.zeros_like(x.value)
        np.add.at(full, (Ellipsis, idx), g)
        return full

    return Tensor(out, parents=(x,), vjps=(vjp,))


# --- graph wrapper ---------------------------------------------------------


class DiffGraph:
    """A reusable differentiable computation with named inputs.

    ``build`` maps a dict of input-name -> Tensor leaves to a root Tensor;
    the tape is retraced on every forward call, which keeps evaluation
    deterministic and caches all intermediates for backward.
    """

    def __init__(self, build, input_names):
        self.build = build
        self.input_names = tuple(input_names)
        self._leaves = None
        self._root = None

    def forward(self, **inputs):
        missing = [n for n in self.input_names if n not in inputs]
        if missing:
            raise ValueError(f"unbound inputs: {missing}")
        leaves = {n: Tensor(np.asarray(inputs[n], dtype=np.float64), name=n) for n in self.input_names}
        self._leaves = leaves
        self._root = self.build(leaves)
        return self._root.value

    def backward(self, seed=None):
        """Adjoint of each named leaf for the last forward pass. A leaf the
        root does not depend on gets a zero adjoint."""
        if self._root is None:
            raise RuntimeError("backward called before forward")
        self._root.backward(seed)
        return {
            n: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for n, leaf in self._leaves.items()
        }


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    warnings: list = field(default_factory=list)


def grad_check(graph, inputs, h=1e-5, tol=1e-4):
    """Compare backward adjoints of sum(root) against central differences.

    Raises on a non-finite forward value; warns when magnitudes exceed
    1e8 (finite differences become ill-conditioned there).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    value = graph.forward(**inputs)
    if not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite forward value in grad_check")
    notes = []
    if np.max(np.abs(value)) > 1e8:
        notes.append("forward values exceed 1e8; finite differences may be ill-conditioned")
        warnings.warn(notes[-1])
    adjoints = graph.backward(np.ones_like(value))

    max_rel = 0.0
    for name in graph.input_names:
        x = np.array(inputs[name], dtype=np.float64)
        an = adjoints[name]
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = graph.forward(**{**inputs, name: x}).sum()
            flat[i] = orig - h
            fm = graph.forward(**{**inputs, name: x}).sum()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = an.reshape(-1)[i]
            denom = max(abs(numeric), abs(analytic), 1.0)
            max_rel = max(max_rel, abs(numeric - analytic) / denom)
    return GradCheckReport(max_rel_error=max_rel, tol=tol, passed=max_rel <= tol, warnings=notes)
