"""Dense reverse-mode differentiation on a dynamic tape.

Every value is a 2-D float64 array (scalars are 1x1).  Ops append a Node to
the tape as they execute, so the node list is already topologically sorted
and backward() is a single reverse sweep that accumulates gradients into
the parents.  One tape serves one forward+backward; build a fresh tape per
sample.

There is no broadcasting except the explicit row-vector bias add: any other
shape mismatch raises, which keeps silent bugs out of the gradient path.
All results are checked finite; overflow is a hard error, not a warning.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class NonScalarLossError(ValueError):
    pass


class DoubleBackwardError(RuntimeError):
    pass


class EmptyMaskError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_matrix(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeMismatchError(f"values must be 2-D, got shape {a.shape}")
    return a


class Node:
    """One entry of the computation graph.

    ``parents`` holds (parent, accumulate) pairs where accumulate(g_out,
    g_parent) adds this node's contribution into the parent's gradient
    buffer in place.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "tape")

    def __init__(self, value, parents, requires_grad, tape):
        self.value = value
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def grad_value(self) -> np.ndarray:
        """The accumulated gradient, zeros if nothing flowed here."""
        return self.grad if self.grad is not None else np.zeros_like(self.value)


class Tape:
    def __init__(self):
        self.nodes = []
        self._consumed = False

    def leaf(self, value, requires_grad: bool = True) -> Node:
        node = Node(_as_matrix(value), (), requires_grad, self)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)


def _record(tape: Tape, value: np.ndarray, parents) -> Node:
    if not np.isfinite(value).all():
        raise NonFiniteError("non-finite value produced by a forward op")
    node = Node(value, tuple(parents), any(p.requires_grad for p, _ in parents), tape)
    tape.nodes.append(node)
    return node


def backward(tape: Tape, loss: Node) -> None:
    """Reverse sweep from ``loss``; leaf gradients end up in node.grad.

    A tape can be swept once: gradients would silently double-accumulate
    otherwise, so a second call raises.
    """
    if loss.value.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.value.shape}")
    if tape._consumed:
        raise DoubleBackwardError("backward already ran on this tape")
    tape._consumed = True
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or not node.requires_grad:
            continue
        for parent, accumulate in node.parents:
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            accumulate(node.grad, parent.grad)
    for node in tape.nodes:
        if not node.parents and node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.value)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(f"matmul {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value

    def d_a(g, acc):
        acc += g @ bv.T

    def d_b(g, acc):
        acc += av.T @ g

    return _record(a.tape, av @ bv, ((a, d_a), (b, d_b)))


def _same_shape(a: Node, b: Node, opname: str):
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"{opname} {a.value.shape} vs {b.value.shape}")


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")

    def d(g, acc):
        acc += g

    return _record(a.tape, a.value + b.value, ((a, d), (b, d)))


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")

    def d_a(g, acc):
        acc += g

    def d_b(g, acc):
        acc -= g

    return _record(a.tape, a.value - b.value, ((a, d_a), (b, d_b)))


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def d(g, acc):
        acc += c * g

    return _record(a.tape, c * a.value, ((a, d),))


def relu(a: Node) -> Node:
    mask = a.value > 0

    def d(g, acc):
        acc += g * mask

    return _record(a.tape, np.where(mask, a.value, 0.0), ((a, d),))


def sigmoid(a: Node) -> Node:
    # tanh form saturates cleanly instead of overflowing exp
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))

    def d(g, acc):
        acc += g * s * (1.0 - s)

    return _record(a.tape, s, ((a, d),))


def absval(a: Node) -> Node:
    sign = np.sign(a.value)  # sign(0) == 0, keeping the subgradient bounded

    def d(g, acc):
        acc += g * sign

    return _record(a.tape, np.abs(a.value), ((a, d),))


def concat_cols(*parts: Node) -> Node:
    rows = parts[0].value.shape[0]
    for p in parts:
        if p.value.shape[0] != rows:
            raise ShapeMismatchError("concat_cols row counts differ")
    offsets = np.cumsum([0] + [p.value.shape[1] for p in parts])
    parents = []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):

        def d(g, acc, lo=lo, hi=hi):
            acc += g[:, lo:hi]

        parents.append((p, d))
    return _record(parts[0].tape, np.concatenate([p.value for p in parts], axis=1), parents)


def concat_rows(*parts: Node) -> Node:
    cols = parts[0].value.shape[1]
    for p in parts:
        if p.value.shape[1] != cols:
            raise ShapeMismatchError("concat_rows column counts differ")
    offsets = np.cumsum([0] + [p.value.shape[0] for p in parts])
    parents = []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):

        def d(g, acc, lo=lo, hi=hi):
            acc += g[lo:hi, :]

        parents.append((p, d))
    return _record(parts[0].tape, np.concatenate([p.value for p in parts], axis=0), parents)


def mean_rows(a: Node) -> Node:
    """Column means as a 1 x cols row vector (average pooling over rows)."""
    rows = a.value.shape[0]

    def d(g, acc):
        acc += g / rows

    return _record(a.tape, a.value.mean(axis=0, keepdims=True), ((a, d),))


def broadcast_add_rowvec(x: Node, b: Node) -> Node:
    if b.value.shape != (1, x.value.shape[1]):
        raise ShapeMismatchError(f"bias {b.value.shape} for input {x.value.shape}")

    def d_x(g, acc):
        acc += g

    def d_b(g, acc):
        acc += g.sum(axis=0, keepdims=True)

    return _record(x.tape, x.value + b.value, ((x, d_x), (b, d_b)))


def gather_rows(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.intp)

    def d(g, acc):
        np.add.at(acc, idx, g)

    return _record(a.tape, a.value[idx], ((a, d),))


def scatter_pairs_symmetric(col: Node, n: int, iu, ju, diag: float) -> Node:
    """Expand a column of per-pair values (pairs (iu[p], ju[p]), i < j) into a
    symmetric n x n matrix with a constant diagonal."""
    if col.value.shape != (len(iu), 1):
        raise ShapeMismatchError(f"expected {(len(iu), 1)} column, got {col.value.shape}")
    out = np.full((n, n), float(diag))
    out[iu, ju] = col.value[:, 0]
    out[ju, iu] = col.value[:, 0]

    def d(g, acc):
        acc[:, 0] += g[iu, ju] + g[ju, iu]

    return _record(col.tape, out, ((col, d),))


# ---------------------------------------------------------------------------
# losses


def bce_with_logits_masked(logits: Node, targets: np.ndarray, mask: np.ndarray) -> Node:
    """Mean binary cross-entropy over the masked entries, from raw logits.

    Computed as max(l, 0) - t*l + log1p(exp(-|l|)), which is exact and does
    not overflow for any logit magnitude.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if logits.value.shape != targets.shape or logits.value.shape != mask.shape:
        raise ShapeMismatchError("bce shapes differ")
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError("empty loss mask")
    l = logits.value[mask]
    t = targets[mask]
    value = np.maximum(l, 0.0) - t * l + np.log1p(np.exp(-np.abs(l)))

    def d(g, acc):
        s = 0.5 * (1.0 + np.tanh(0.5 * l))
        acc[mask] += (g[0, 0] / count) * (s - t)

    return _record(logits.tape, np.array([[value.mean()]]), ((logits, d),))


def mae_masked(pred: Node, targets: np.ndarray, mask: np.ndarray) -> Node:
    """Mean absolute error over the masked entries; subgradient sign(0) = 0."""
    targets = np.asarray(targets, dtype=np.float64)
    if pred.value.shape != targets.shape or pred.value.shape != mask.shape:
        raise ShapeMismatchError("mae shapes differ")
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError("empty loss mask")
    diff = pred.value[mask] - targets[mask]

    def d(g, acc):
        acc[mask] += (g[0, 0] / count) * np.sign(diff)

    return _record(pred.tape, np.array([[np.abs(diff).mean()]]), ((pred, d),))


def upper_triangle_mask(n: int) -> np.ndarray:
    """Strict upper triangle (diagonal excluded), the loss domain for
    symmetric graphs."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


# ---------------------------------------------------------------------------
# numeric gradient checking


def grad_check(f, theta: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient and central
    finite differences.

    ``f`` maps a flat parameter vector to (scalar value, flat gradient).
    Relative error per coordinate is |g_a - g_n| / max(1, |g_a|, |g_n|).
    """
    theta = np.asarray(theta, dtype=np.float64)
    _, g_analytic = f(theta)
    g_analytic = np.asarray(g_analytic, dtype=np.float64)
    g_numeric = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        g_numeric[i] = (f(tp)[0] - f(tm)[0]) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(g_analytic), np.abs(g_numeric)))
    return float((np.abs(g_analytic - g_numeric) / denom).max())
