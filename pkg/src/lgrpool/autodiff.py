"""Minimal reverse-mode differentiation over dense float64 matrices.

Every Value wraps a 2-d numpy array. Operations build a tape of parent
links with local backward closures; backward() runs one reverse
topological sweep from a scalar loss, accumulating gradients additively
for shared sub-expressions. Sparse matrices are constants: spmm
propagates gradient to its dense operand only.

A tape is single use: calling backward twice on the same loss raises.
Parameter gradients accumulate across tapes until zeroed, which is how
mini-batches sum per-graph contributions.
"""
from __future__ import annotations

import numpy as np

from .errors import (
    DoubleBackward,
    LabelOutOfRange,
    NonDeterministic,
    NonFinite,
    NotScalar,
    ShapeMismatch,
)
from .sparse import SparseMatrix

PROB_CLAMP = 1e-12


class Value:
    """Node of the differentiable computation graph."""

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"Value requires a matrix, got ndim={arr.ndim}")
        self.data = arr
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = []
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def accumulate_grad(self, contrib: np.ndarray):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += contrib

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Value:
    return Value(data, requires_grad=False)


def parameter(data) -> Value:
    return Value(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _make(op: str, data: np.ndarray, parents) -> Value:
    """Wrap a forward result, keeping only differentiable parent links."""
    if not np.all(np.isfinite(data)):
        raise NonFinite(f"{op}: non-finite forward output")
    out = Value(data)
    out._parents = [(p, fn) for p, fn in parents if p.requires_grad]
    out.requires_grad = bool(out._parents)
    return out


def _check_same_shape(op: str, a: Value, b: Value):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(op, a.data.shape, b.data.shape)


# ---------------------------------------------------------------- primitives


def matmul(a: Value, b: Value) -> Value:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    out = a.data @ b.data
    return _make(
        "matmul",
        out,
        [
            (a, lambda g, b=b: g @ b.data.T),
            (b, lambda g, a=a: a.data.T @ g),
        ],
    )


def spmm(s: SparseMatrix, b: Value) -> Value:
    """Sparse-dense product; gradient flows to the dense operand only."""
    if s.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("spmm", s.shape, b.data.shape)
    out = s.matmul_dense(b.data)
    return _make("spmm", out, [(b, lambda g, s=s: s.transpose_matmul_dense(g))])


def add(a: Value, b: Value) -> Value:
    """Elementwise sum; b may be a single row broadcast over a's rows."""
    if a.data.shape != b.data.shape:
        if b.data.shape == (1, a.data.shape[1]):
            out = a.data + b.data
            return _make(
                "add",
                out,
                [
                    (a, lambda g: g),
                    (b, lambda g: g.sum(axis=0, keepdims=True)),
                ],
            )
        raise ShapeMismatch("add", a.data.shape, b.data.shape)
    return _make("add", a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Value, b: Value) -> Value:
    _check_same_shape("sub", a, b)
    return _make("sub", a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def scale(a: Value, c: float) -> Value:
    c = float(c)
    return _make("scale", a.data * c, [(a, lambda g, c=c: g * c)])


def hadamard(a: Value, b: Value) -> Value:
    _check_same_shape("hadamard", a, b)
    return _make(
        "hadamard",
        a.data * b.data,
        [
            (a, lambda g, b=b: g * b.data),
            (b, lambda g, a=a: g * a.data),
        ],
    )


def scale_rows(a: Value, s: Value) -> Value:
    """Multiply row i of a by the scalar s[i, 0]."""
    if s.data.shape != (a.data.shape[0], 1):
        raise ShapeMismatch("scale_rows", a.data.shape, s.data.shape)
    return _make(
        "scale_rows",
        a.data * s.data,
        [
            (a, lambda g, s=s: g * s.data),
            (s, lambda g, a=a: (g * a.data).sum(axis=1, keepdims=True)),
        ],
    )


def concat_cols(a: Value, b: Value) -> Value:
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeMismatch("concat_cols", a.data.shape, b.data.shape)
    na = a.data.shape[1]
    return _make(
        "concat_cols",
        np.concatenate([a.data, b.data], axis=1),
        [
            (a, lambda g, na=na: g[:, :na]),
            (b, lambda g, na=na: g[:, na:]),
        ],
    )


def sigmoid(a: Value) -> Value:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make("sigmoid", out, [(a, lambda g, out=out: g * out * (1.0 - out))])


def relu(a: Value) -> Value:
    mask = a.data > 0
    return _make("relu", a.data * mask, [(a, lambda g, mask=mask: g * mask)])


def softmax_rows(a: Value) -> Value:
    if not np.all(np.isfinite(a.data)):
        raise NonFinite("softmax_rows: non-finite input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g, out=out):
        dot = (g * out).sum(axis=1, keepdims=True)
        return out * (g - dot)

    return _make("softmax_rows", out, [(a, back)])


def mean_rows(a: Value) -> Value:
    n = a.data.shape[0]
    out = a.data.mean(axis=0, keepdims=True)
    return _make(
        "mean_rows",
        out,
        [(a, lambda g, n=n: np.repeat(g, n, axis=0) / n)],
    )


def sum_all(a: Value) -> Value:
    return _make(
        "sum_all",
        np.array([[a.data.sum()]]),
        [(a, lambda g: np.full_like(a.data, g[0, 0]))],
    )


def sum_sq_rows(a: Value) -> Value:
    out = (a.data**2).sum(axis=1, keepdims=True)
    return _make("sum_sq_rows", out, [(a, lambda g, a=a: 2.0 * a.data * g)])


def gather_rows(a: Value, index) -> Value:
    idx = np.asarray(index, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeMismatch("gather_rows", a.data.shape, (len(idx),))

    def back(g, idx=idx, a=a):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _make("gather_rows", a.data[idx], [(a, back)])


def scatter_add_rows(a: Value, index, num_rows: int) -> Value:
    """out[j] = sum of a's rows i with index[i] == j."""
    idx = np.asarray(index, dtype=np.int64)
    if len(idx) != a.data.shape[0]:
        raise ShapeMismatch("scatter_add_rows", a.data.shape, (len(idx),))
    if len(idx) and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeMismatch("scatter_add_rows", (num_rows,), (len(idx),))
    out = np.zeros((num_rows, a.data.shape[1]))
    np.add.at(out, idx, a.data)
    return _make("scatter_add_rows", out, [(a, lambda g, idx=idx: g[idx])])


def cross_entropy_rows(probs: Value, labels) -> Value:
    """Mean over rows of -log(probs[row, label]), clamped at 1e-12."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    r, c = probs.data.shape
    if len(labels) != r:
        raise ShapeMismatch("cross_entropy_rows", probs.data.shape, (len(labels),))
    if len(labels) and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels outside [0, {c})")
    picked = probs.data[np.arange(r), labels]
    clamped = np.maximum(picked, PROB_CLAMP)
    out = np.array([[-np.log(clamped).mean()]])

    def back(g, probs=probs, labels=labels, picked=picked, clamped=clamped, r=r):
        gp = np.zeros_like(probs.data)
        live = picked >= PROB_CLAMP
        gp[np.arange(r), labels] = -g[0, 0] * live / (clamped * r)
        return gp

    return _make("cross_entropy_rows", out, [(probs, back)])


# ------------------------------------------------------------------ backward


def _topo_order(root: Value):
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p, _ in parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Value) -> dict:
    """Reverse sweep from a 1x1 loss; returns {leaf Value: gradient}."""
    if loss.data.shape != (1, 1):
        raise NotScalar(f"backward requires a 1x1 loss, got {loss.data.shape}")
    if loss._backward_done:
        raise DoubleBackward("backward already ran on this loss")
    loss._backward_done = True

    order = _topo_order(loss)
    loss.accumulate_grad(np.ones((1, 1)))
    for node in reversed(order):
        g = node._grad
        if g is None:
            continue
        for parent, fn in node._parents:
            parent.accumulate_grad(fn(g))
    return {
        node: node.grad
        for node in order
        if node.requires_grad and not node._parents
    }


# ---------------------------------------------------------------- grad check


def grad_check(
    builder,
    params,
    eps: float = 1e-6,
    sample_fraction: float = 0.05,
    min_coords: int = 20,
    seed: int = 0,
) -> float:
    """Compare backward gradients against central finite differences.

    builder maps the parameter set to a scalar loss Value and must be
    deterministic. A random coordinate sample (at least min_coords per
    array) is perturbed by +-eps. Returns the maximum of
    |analytic - numeric| / max(1, |numeric|) over sampled coordinates.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    named = list(params.items())

    f0 = builder(params).data[0, 0]
    f1 = builder(params).data[0, 0]
    if f0 != f1:
        raise NonDeterministic(f"loss evaluations differ: {f0!r} vs {f1!r}")

    for _, v in named:
        v.zero_grad()
    loss = builder(params)
    backward(loss)
    analytic = {name: v.grad.copy() for name, v in named}

    rng = np.random.default_rng(seed)
    max_err = 0.0
    for name, v in named:
        flat = v.data.reshape(-1)
        total = flat.size
        k = min(total, max(min_coords, int(np.ceil(sample_fraction * total))))
        coords = rng.choice(total, size=k, replace=False)
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            old = flat[c]
            flat[c] = old + eps
            f_plus = builder(params).data[0, 0]
            flat[c] = old - eps
            f_minus = builder(params).data[0, 0]
            flat[c] = old
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(a_flat[c] - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
