"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Record` is rebuilt for every forward pass.  Leaves are created with
:meth:`Record.leaf`, primitive ops append a node to the record, and
:func:`backward` walks the nodes in reverse to produce gradients for every
recorded tensor, network inputs included.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class RecordError(ValueError):
    """Raised when a tensor or loss does not belong to the record in use."""


class Tensor:
    """A node value on a :class:`Record`.

    ``data`` is a C-contiguous float64 array; ``shape`` mirrors it.
    """

    __slots__ = ("data", "record", "index", "name")

    def __init__(self, data: np.ndarray, record: "Record", index: int, name: str = ""):
        self.data = data
        self.record = record
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor#{self.index}{label}(shape={self.shape})"


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    forward: Callable[..., np.ndarray]
    # maps (upstream grad, *input arrays, output array) -> per-input grads
    vjp: Callable[..., tuple[np.ndarray | None, ...]]


@dataclass
class Record:
    """Ordered log of primitive-op applications (the computation record)."""

    values: list[Tensor] = field(default_factory=list)
    nodes: list[_Node] = field(default_factory=list)
    # output index -> node position; leaves are absent
    _producer: dict[int, int] = field(default_factory=dict)

    def leaf(self, value, name: str = "") -> Tensor:
        arr = np.array(value, dtype=np.float64, copy=True, order="C")
        t = Tensor(arr, self, len(self.values), name)
        self.values.append(t)
        return t

    def _emit(self, op: str, inputs: Sequence[Tensor], forward, vjp) -> Tensor:
        for t in inputs:
            if t.record is not self:
                raise RecordError(f"{t!r} belongs to a different record")
        out_data = forward(*[t.data for t in inputs])
        out = Tensor(np.ascontiguousarray(out_data, dtype=np.float64), self, len(self.values))
        self.values.append(out)
        self._producer[out.index] = len(self.nodes)
        self.nodes.append(_Node(op, tuple(t.index for t in inputs), out.index, forward, vjp))
        return out

    def replay(self) -> list[np.ndarray]:
        """Re-execute every node from the stored leaves; returns all values by index."""
        vals: list[np.ndarray] = [t.data for t in self.values]
        for node in self.nodes:
            vals[node.output] = np.ascontiguousarray(
                node.forward(*[vals[i] for i in node.inputs]), dtype=np.float64
            )
        return vals


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g, x, y, _out):
        return g @ y.T, x.T @ g

    return a.record._emit("matmul", (a, b), np.matmul, vjp)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` without materialising the transpose (dense-layer form)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt: cannot multiply {a.shape} by transpose of {b.shape}")

    def vjp(g, x, y, _out):
        return g @ y, g.T @ x

    return a.record._emit("matmul_nt", (a, b), lambda x, y: x @ y.T, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over the rows of ``a``."""
    if a.shape == b.shape:
        return a.record._emit("add", (a, b), np.add, lambda g, x, y, o: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return a.record._emit("add_row", (a, b), np.add, lambda g, x, y, o: (g, g.sum(axis=0)))
    raise ShapeError(f"add: cannot broadcast {b.shape} onto {a.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return a.record._emit("mul", (a, b), np.multiply, lambda g, x, y, o: (g * y, g * x))


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return a.record._emit(
        "scale", (a,), lambda x: x * alpha, lambda g, x, o: (g * alpha,)
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return a.record._emit("transpose", (a,), lambda x: x.T.copy(), lambda g, x, o: (g.T,))


def relu(x: Tensor) -> Tensor:
    return x.record._emit(
        "relu", (x,), lambda v: np.maximum(v, 0.0), lambda g, v, o: (g * (v > 0.0),)
    )


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    return x.record._emit(
        "sum", (x,), lambda v: np.array(v.sum()), lambda g, v, o: (np.full_like(v, g),)
    )


def pick(q: Tensor, actions: Sequence[int]) -> Tensor:
    """Row-wise gather ``q[i, actions[i]]`` (the taken-action Q-values)."""
    idx = np.asarray(actions, dtype=np.intp)
    if q.data.ndim != 2 or idx.shape != (q.shape[0],):
        raise ShapeError(f"pick: {len(idx)} indices for matrix {q.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= q.shape[1]):
        raise ShapeError(f"pick: index out of range for {q.shape[1]} columns")
    rows = np.arange(q.shape[0])

    def vjp(g, v, o):
        gv = np.zeros_like(v)
        gv[rows, idx] = g
        return (gv,)

    return q.record._emit("pick", (q,), lambda v: v[rows, idx], vjp)


def squared_error(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over the batch of (target - pred)**2; no gradient reaches ``target``."""
    _check_same(pred, target, "squared_error")
    n = pred.data.size

    def fwd(p, t):
        d = t - p
        return np.array(np.dot(d.ravel(), d.ravel()) / n)

    def vjp(g, p, t, o):
        return (g * (-2.0 / n) * (t - p), None)

    return pred.record._emit("squared_error", (pred, target), fwd, vjp)


def cross_entropy_on_logits(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` with max-subtraction for stability."""
    if logits.data.ndim != 1 or logits.shape[0] < 2:
        raise ShapeError(f"cross_entropy_on_logits: need a vector of >=2 logits, got {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} logits")

    def fwd(z):
        m = z.max()
        return np.array(m + np.log(np.exp(z - m).sum()) - z[label])

    def vjp(g, z, o):
        e = np.exp(z - z.max())
        p = e / e.sum()
        p[label] -= 1.0
        return (g * p,)

    return logits.record._emit("cross_entropy", (logits,), fwd, vjp)


def backward(record: Record, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to every tensor on ``record``."""
    if loss.record is not record or record.values[loss.index] is not loss:
        raise RecordError(f"{loss!r} is not on this record")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(record.values)
    grads[loss.index] = np.ones_like(loss.data)
    stop = record._producer.get(loss.index, -1)
    for node in reversed(record.nodes[: stop + 1]):
        g = grads[node.output]
        if g is None:
            continue
        ins = [record.values[i].data for i in node.inputs]
        for i, gi in zip(node.inputs, node.vjp(g, *ins, record.values[node.output].data)):
            if gi is None:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi
    return {
        t: (grads[t.index] if grads[t.index] is not None else np.zeros_like(t.data))
        for t in record.values
    }
