"""Dense tensors and the append-only tape used for reverse-mode differentiation."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import ContractError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    """One recorded operation.

    ``backward_fn`` maps the gradient of ``output`` to one gradient (or
    ``None``) per entry of ``inputs``. Saved activations live in its closure.
    """

    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward_fn: BackwardFn


@dataclass
class Graph:
    """Append-only sequence of nodes; append order is a topological order."""

    nodes: list[Node] = field(default_factory=list)
    released: bool = False

    def append(self, node: Node) -> int:
        if self.released:
            raise ContractError("cannot record into a released graph")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def release(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []
        self.released = True


class _State(threading.local):
    def __init__(self) -> None:
        self.graph: Graph | None = None
        self.enabled = True


_state = _State()


def current_graph() -> Graph:
    """Graph that new operations on this thread are appended to."""
    if _state.graph is None or _state.graph.released:
        _state.graph = Graph()
    return _state.graph


def is_grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; outputs computed inside never require grad."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """N-dimensional array that can take part in a recorded computation.

    Layout for volumetric data is ``(N, C, D, H, W)``. Precision follows
    the wrapped array: float32 for training, float64 for gradient checks.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc" and requires_grad:
            raise ContractError("only floating point tensors can require grad")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: tuple[Graph, int] | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic sugar (implemented in ops) --------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self, axis=None) -> "Tensor":
        from . import ops
        return ops.sum(self, axis=axis)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and, if needed, append a node for it."""
    needs = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        graph = current_graph()
        for t in inputs:
            if t._node is not None and t._node[0] is not graph:
                raise ContractError(f"{op}: input belongs to a different graph")
        idx = graph.append(Node(op, tuple(inputs), out, backward_fn))
        out._node = (graph, idx)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ContractError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Nodes are visited in exact reverse append order. Gradients add onto
    whatever is already stored, so callers zero them between steps.
    Unless ``retain_graph`` is set, the graph is released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad")
    _accumulate(loss, np.ones_like(loss.data))
    if loss._node is None:
        return
    graph, last = loss._node
    pending = {id(loss)}
    for node in reversed(graph.nodes[: last + 1]):
        out = node.output
        if id(out) not in pending or out.grad is None:
            continue
        grads = node.backward_fn(out.grad)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            _accumulate(inp, g)
            pending.add(id(inp))
    if not retain_graph:
        graph.release()


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))
