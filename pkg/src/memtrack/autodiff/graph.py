"""Tape-based computation graph and the Tensor handle that records onto it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError):
    def __init__(self, op: str, node: int | None):
        self.op = op
        self.node = node
        super().__init__(f"{op}: non-finite output at node {node}")


class GraphConsumedError(AutodiffError):
    pass


@dataclass
class _Record:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Append-only operation tape plus a registry of named parameter leaves.

    A graph is built fresh for every forward pass and supports exactly one
    call to :meth:`backward`.
    """

    def __init__(self, params: Mapping[str, np.ndarray] | None = None, check_finite: bool = True):
        self.store = params if params is not None else {}
        self.check_finite = check_finite
        self.records: list[_Record] = []
        self.shapes: list[tuple[int, ...]] = []
        self.leaves: dict[str, Tensor] = {}
        self._consumed = False

    def _new_node(self, shape) -> int:
        self.shapes.append(tuple(shape))
        return len(self.shapes) - 1

    def param(self, name: str) -> "Tensor":
        """Leaf for a stored parameter; repeated lookups share one leaf."""
        t = self.leaves.get(name)
        if t is None:
            if name not in self.store:
                raise KeyError(f"unknown parameter {name!r}")
            data = self.store[name]
            t = Tensor(data, self, self._new_node(data.shape))
            self.leaves[name] = t
        return t

    def leaf(self, name: str, value) -> "Tensor":
        """Register an ad-hoc named leaf (inputs under gradient check, etc.)."""
        if name in self.leaves:
            raise ValueError(f"leaf {name!r} already registered")
        data = np.asarray(value, dtype=np.float64)
        t = Tensor(data, self, self._new_node(data.shape))
        self.leaves[name] = t
        return t

    def constant(self, value) -> "Tensor":
        return Tensor(np.asarray(value, dtype=np.float64), None, None)

    def record(self, op: str, out: np.ndarray, inputs: Sequence["Tensor"], backward) -> "Tensor":
        if self._consumed:
            raise GraphConsumedError("graph already consumed by backward")
        node = self._new_node(out.shape)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(op, node)
        ids = tuple(t.node for t in inputs)
        if any(i is not None for i in ids):
            self.records.append(_Record(op, ids, node, backward))
        return Tensor(out, self, node)

    def backward(self, loss: "Tensor") -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns a gradient for every registered leaf and stored parameter;
        those the loss does not depend on receive zeros of matching shape.
        """
        if self._consumed:
            raise GraphConsumedError("backward already called on this graph")
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, detail="loss must be scalar")
        self._consumed = True
        grads: list[np.ndarray | None] = [None] * len(self.shapes)
        if loss.node is not None:
            grads[loss.node] = np.ones(loss.shape)
        for rec in reversed(self.records):
            g = grads[rec.output]
            if g is None:
                continue
            grads[rec.output] = None
            for node, gi in zip(rec.inputs, rec.backward(g)):
                if node is None or gi is None:
                    continue
                if grads[node] is None:
                    grads[node] = np.array(gi, dtype=np.float64, copy=True)
                else:
                    grads[node] += gi
        out = {}
        for name, t in self.leaves.items():
            g = grads[t.node]
            out[name] = np.zeros(t.shape) if g is None else g.reshape(t.shape)
        for name, value in self.store.items():
            if name not in out:
                out[name] = np.zeros(np.shape(value))
        return out


def _graph_of(*tensors) -> Graph | None:
    for t in tensors:
        if isinstance(t, Tensor) and t.graph is not None:
            return t.graph
    return None


class Tensor:
    """Dense float64 array bound to a graph node (``node is None`` for constants)."""

    __slots__ = ("data", "graph", "node")
    __array_priority__ = 100

    def __init__(self, data, graph: Graph | None = None, node: int | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def as_tensor(x, graph: Graph | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), None, None)
