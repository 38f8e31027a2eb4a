"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A ``Tape`` records every differentiable operation in creation order (which is
topological by construction). ``Tape.backward(loss)`` walks the records in
reverse exactly once, accumulating gradients additively into ``Tensor.grad``.
Gradients stay accumulated until the caller clears them; the optimizer owns
zeroing.

Ops executed while no tape is active run forward-only (evaluation mode).
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, severed from the graph: no gradient ever flows back."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the functional forms below do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)`` after exiting (the node list survives the context).
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and sweep the tape once in reverse order.

        Gradients accumulate additively into every reachable tensor with
        ``requires_grad``; call again only after an optimizer has consumed
        and cleared them.
        """
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss is not connected to any tracked parameter")
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self.nodes):
            if out.grad is not None:
                backward_fn(out.grad)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Register a custom op on the active tape.

    ``backward_fn(grad_out)`` must accumulate into the inputs via ``accumulate``.
    Recording happens only when a tape is active and some input requires grad.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, backward_fn))
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to ``t`` (no-op for untracked tensors)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return record(out, (a, b), backward)


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return record(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return record(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def backward(g):
        accumulate(x, g * (x.data > 0.0))

    return record(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise 1/(1+e^-x), computed branch-wise so large |x| cannot overflow."""
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)

    def backward(g):
        accumulate(x, g * out.data * (1.0 - out.data))

    return record(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def backward(g):
        accumulate(x, g / x.data)

    return record(out, (x,), backward)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return record(out, (x,), backward)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def backward(g):
        if axis is None:
            accumulate(x, np.broadcast_to(g / n, x.data.shape).copy())
        else:
            accumulate(x, np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape).copy())

    return record(out, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis; rows sum to 1 within 1e-12."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def backward(g):
        accumulate(x, (g - (g * s).sum(axis=-1, keepdims=True)) * s)

    return record(out, (x,), backward)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(row))) over the last axis, max-subtracted for stability."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    se = e.sum(axis=-1, keepdims=True)
    out = Tensor((m + np.log(se)).squeeze(-1))
    soft = e / se

    def backward(g):
        accumulate(x, np.expand_dims(g, -1) * soft)

    return record(out, (x,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row logits."""
    targets = np.asarray(targets)
    n, v = logits.data.shape
    if targets.ndim != 1 or targets.shape[0] != n:
        raise DimensionError(f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target index out of range [0, {v})")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    se = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(se)).ravel()
    picked = logits.data[np.arange(n), targets]
    out = Tensor(np.mean(lse - picked))
    soft = e / se

    def backward(g):
        gl = soft * (g / n)
        gl[np.arange(n), targets] -= g / n
        accumulate(logits, gl)

    return record(out, (logits,), backward)


# ---------------------------------------------------------------------------
# indexing / dispatch primitives


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows ``table[indices]``; backward scatter-adds into the table."""
    indices = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[indices])

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, indices, g)
            accumulate(table, gt)

    return record(out, (table,), backward)


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row range ``x[start:stop]`` as a new tensor."""
    out = Tensor(x.data[start:stop])

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[start:stop] = g
            accumulate(x, gx)

    return record(out, (x,), backward)


def take_pairs(x: Tensor, row_idx: np.ndarray, col_idx: np.ndarray) -> Tensor:
    """Extract ``x[row_idx[i], col_idx[i]]`` as a vector."""
    row_idx = np.asarray(row_idx, dtype=np.int64)
    col_idx = np.asarray(col_idx, dtype=np.int64)
    out = Tensor(x.data[row_idx, col_idx])

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (row_idx, col_idx), g)
            accumulate(x, gx)

    return record(out, (x,), backward)


def scatter_weighted_rows(rows: Tensor, weights: Tensor, row_idx: np.ndarray,
                          n_out: int) -> Tensor:
    """Accumulate ``weights[i] * rows[i]`` into output row ``row_idx[i]``.

    The combine half of sparse expert dispatch: several selections may target
    the same output row and their contributions add.
    """
    row_idx = np.asarray(row_idx, dtype=np.int64)
    out_data = np.zeros((n_out, rows.data.shape[1]))
    np.add.at(out_data, row_idx, weights.data[:, None] * rows.data)
    out = Tensor(out_data)

    def backward(g):
        g_rows = g[row_idx]
        accumulate(rows, weights.data[:, None] * g_rows)
        accumulate(weights, (rows.data * g_rows).sum(axis=1))

    return record(out, (rows, weights), backward)


def detach(x: Tensor) -> Tensor:
    return x.detach()
