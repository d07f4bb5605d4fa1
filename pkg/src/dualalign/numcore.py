"""Dense float64 math for the loss path, a small reverse-mode tape, and a
finite-difference gradient checker.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64. Scalars that
flow through the tape (the loss, the log-temperature) are 1x1 matrices so
every node has the same shape discipline.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Sequence

import numpy as np

from .errors import IndexOutOfRange, NonDeterministicLoss, ZeroNormRow

NORM_FLOOR = 1e-12
LOG_FLOOR = 1e-300


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def safe_log(x):
    return np.log(np.maximum(x, LOG_FLOOR))


def l2_normalize_rows(m) -> np.ndarray:
    m = as_matrix(m)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return m / norms[:, None]


def softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    z = np.exp(m - m.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def log_softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    return shifted - safe_log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_targets(targets, rows: int, cols: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != rows:
        raise IndexOutOfRange(f"{t.shape[0]} targets for {rows} rows")
    if t.size and (t.min() < 0 or t.max() >= cols):
        raise IndexOutOfRange(f"target index outside [0, {cols})")
    return t


def cross_entropy_rows(logits, targets) -> float:
    """Mean over rows of ``-log softmax(logits)[row, target]``."""
    logits = as_matrix(logits)
    t = _check_targets(targets, *logits.shape)
    lsm = log_softmax_rows(logits)
    return float(-lsm[np.arange(len(t)), t].mean())


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} shape={self.value.shape}>"


class GradTape(OrderedDict):
    """Ordered ``parameter name -> gradient`` map produced by a backward pass."""

    def __setitem__(self, key, value):
        if key in self:
            raise KeyError(f"parameter {key!r} already has a gradient")
        super().__setitem__(key, value)


class Tape:
    """Records operations in execution order; ``backward`` walks them in reverse."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, value, parents=(), backward_fn=None, name=None) -> Node:
        node = Node(value, parents, backward_fn, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        """A parameter (``name`` set) or constant input (``name`` None)."""
        return self._push(as_matrix(value), name=name)

    def constant(self, value) -> Node:
        return self.leaf(value)

    def matmul(self, a: Node, b: Node) -> Node:
        def bwd(g):
            return g @ b.value.T, a.value.T @ g

        return self._push(a.value @ b.value, (a, b), bwd)

    def transpose(self, a: Node) -> Node:
        return self._push(a.value.T.copy(), (a,), lambda g: (g.T,))

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum; ``b`` may be a 1 x cols row broadcast over ``a``."""
        if b.shape != a.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
            raise ValueError(f"cannot add shapes {a.shape} and {b.shape}")
        broadcast = b.shape != a.shape

        def bwd(g):
            return g, (g.sum(axis=0, keepdims=True) if broadcast else g)

        return self._push(a.value + b.value, (a, b), bwd)

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push(a.value * c, (a,), lambda g: (g * c,))

    def mul_scalar(self, a: Node, s: Node) -> Node:
        """Multiply ``a`` by the 1x1 node ``s``."""
        sv = float(s.value[0, 0])

        def bwd(g):
            return g * sv, np.array([[np.sum(g * a.value)]])

        return self._push(a.value * sv, (a, s), bwd)

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._push(out, (a,), lambda g: (g * out,))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        # np.maximum keeps NaN visible downstream
        return self._push(np.maximum(a.value, 0.0), (a,), lambda g: (g * mask,))

    def row_mean(self, a: Node) -> Node:
        rows = a.shape[0]

        def bwd(g):
            return (np.broadcast_to(g, a.shape) / rows,)

        return self._push(a.value.mean(axis=0, keepdims=True), (a,), bwd)

    def l2_normalize_rows(self, a: Node) -> Node:
        out = l2_normalize_rows(a.value)
        norms = np.sqrt(np.einsum("ij,ij->i", a.value, a.value))[:, None]

        def bwd(g):
            radial = np.einsum("ij,ij->i", g, out)[:, None]
            return ((g - out * radial) / norms,)

        return self._push(out, (a,), bwd)

    def cross_entropy_rows(self, logits: Node, targets) -> Node:
        rows, cols = logits.shape
        t = _check_targets(targets, rows, cols)
        lsm = log_softmax_rows(logits.value)
        loss = -lsm[np.arange(rows), t].mean()

        def bwd(g):
            d = np.exp(lsm)
            d[np.arange(rows), t] -= 1.0
            return (d * (float(g[0, 0]) / rows),)

        return self._push(np.array([[loss]]), (logits,), bwd)

    def backward(self, out: Node) -> GradTape:
        """Propagate from the 1x1 node ``out``; returns gradients of named leaves."""
        if out.shape != (1, 1):
            raise ValueError("backward needs a 1x1 output node")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                parent.grad = g if parent.grad is None else parent.grad + g
        grads = GradTape()
        for node in self.nodes:
            if node.name is not None:
                grads[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return grads


# ---------------------------------------------------------------------------
# Finite-difference check
# ---------------------------------------------------------------------------

LossFn = Callable[[Sequence[np.ndarray]], "tuple[float, Sequence[np.ndarray]]"]


def _stacked_perturbations(p: np.ndarray, start: int, stop: int, eps: float) -> np.ndarray:
    """Copies of ``p``: entries start..stop-1 each nudged by +eps, then by -eps."""
    k = stop - start
    flat = np.repeat(p.reshape(1, -1), 2 * k, axis=0)
    j = np.arange(k)
    flat[j, start + j] += eps
    flat[k + j, start + j] -= eps
    return flat.reshape((2 * k,) + p.shape)


def grad_check(
    loss_fn: LossFn,
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
    value_fn: Callable[[Sequence[np.ndarray]], float] | None = None,
    stacked: bool = False,
    chunk: int = 512,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` with one gradient per
    parameter. ``value_fn``, if given, is a cheaper loss-only evaluator used
    at the perturbed points; it must agree with ``loss_fn``. With
    ``stacked=True`` it is called with one parameter replaced by a stack of
    perturbed copies (leading axis S) and must return S losses, which lets
    a broadcasting forward pass evaluate many differences at once.

    Returns the max over all entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not (1e-6 <= eps <= 1e-2):
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    if stacked and value_fn is None:
        raise ValueError("stacked=True needs a value_fn")
    params = [np.array(p, dtype=np.float64, copy=True) for p in params]
    loss0, analytic = loss_fn(params)
    loss1, _ = loss_fn([p.copy() for p in params])
    if float(loss0) != float(loss1):
        raise NonDeterministicLoss(f"two evaluations differ: {loss0!r} vs {loss1!r}")
    if value_fn is None:
        value_fn = lambda ps: float(loss_fn(ps)[0])
    else:
        base = float(np.asarray(value_fn(params)).reshape(-1)[0])
        if abs(base - float(loss0)) > 1e-12 * max(1.0, abs(float(loss0))):
            raise ValueError("value_fn disagrees with loss_fn at the base point")
    worst = 0.0
    for k, p in enumerate(params):
        ga = np.asarray(analytic[k], dtype=np.float64)
        if ga.shape != p.shape:
            raise ValueError(f"gradient {k} has shape {ga.shape}, parameter has {p.shape}")
        if stacked:
            num = np.empty(p.size)
            for start in range(0, p.size, chunk):
                stop = min(start + chunk, p.size)
                trial = list(params)
                trial[k] = _stacked_perturbations(p, start, stop, eps)
                losses = np.asarray(value_fn(trial), dtype=np.float64).reshape(-1)
                n = stop - start
                num[start:stop] = (losses[:n] - losses[n:]) / (2.0 * eps)
            a = ga.reshape(-1)
            err = np.abs(a - num) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
            if not np.all(np.isfinite(err)):
                return math.inf
            worst = max(worst, float(err.max(initial=0.0)))
            continue
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = float(value_fn(params))
            p[idx] = orig - eps
            down = float(value_fn(params))
            p[idx] = orig
            num = (up - down) / (2.0 * eps)
            a = float(ga[idx])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            if not math.isfinite(err):
                return math.inf
            worst = max(worst, err)
    return worst
