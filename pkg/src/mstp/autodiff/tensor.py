"""A small reverse-mode autodiff engine over numpy arrays.

The graph is built as operations run (define-by-run). Each `Tensor` wraps a
numpy array; an op that participates in differentiation attaches a `_Node`
recording its input tensors and a closure that maps the output gradient to
per-input gradients. `backward()` walks the graph once in reverse
topological order, accumulating gradients additively at fan-out points.

Storage is float32 by default. Ops that reduce (sums, means, softmax
denominators, normalisation statistics) accumulate in float64 before casting
back, which keeps desk-scale gradient checks tight without doubling memory.
The engine also runs end to end in float64 when the inputs are float64;
verification tests use that mode.

Graphs are single-shot: calling backward a second time through any node that
already participated in a backward pass raises `GraphError`. Higher-order
derivatives are out of scope by design.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, GraphError, ShapeError

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, data prep)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _Node:
    __slots__ = ("inputs", "backward_fn", "consumed", "op_name")

    def __init__(self, inputs, backward_fn, op_name):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False
        self.op_name = op_name


class Tensor:
    """A numpy array plus optional gradient bookkeeping.

    `requires_grad` marks leaves the user wants gradients for; interior
    tensors inherit it from their inputs. `grad` is a plain numpy array of
    the same shape, populated by `backward()` and accumulated additively
    across uses until `zero_grad()`.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # numpy scalars (what ufuncs return for 0-d inputs) count as arrays
        # here, otherwise a float64 graph would silently drop to float32 the
        # moment a reduction produces a 0-d value
        keep = isinstance(data, (np.ndarray, np.floating)) and \
            data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep:
            # lists and scalars default to float32; float64 is opt-in
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[_Node] = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy); treat as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar (implementations live in ops.py) ----------------

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

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes if axes else None)

    def sum(self, axis=None):
        from . import ops

        return ops.sum(self, axis=axis)

    def mean(self, axis=None):
        from . import ops

        return ops.mean(self, axis=axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    """Coerce numbers / arrays / Tensors to Tensor without copying Tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op_name: str,
) -> Tensor:
    """Wrap an op result, attaching a graph node only when gradients can flow.

    `backward_fn(g)` must return one gradient array (or None) per input, in
    order. It is only ever called once per node.
    """
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out.node = _Node(tuple(inputs), backward_fn, op_name)
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates `.grad` on every tensor reachable from `loss` that either
    requires grad or sits on a path to one. Fan-out accumulates additively.
    The traversed subgraph is marked consumed; a second sweep through any of
    its nodes raises `GraphError`.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward() expects a Tensor")
    if loss.data.ndim != 0:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tensor that requires grad")

    # Iterative post-order DFS; recursion depth would scale with graph depth.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            if t.node.consumed:
                raise GraphError(
                    f"graph already consumed by a previous backward() (at op '{t.node.op_name}')"
                )
            for inp in t.node.inputs:
                if inp.node is not None or inp.requires_grad:
                    stack.append((inp, False))

    loss.grad = _accumulate(loss.grad, np.ones_like(loss.data))
    for t in reversed(topo):
        node = t.node
        if node is None:
            continue
        node.consumed = True
        grads = node.backward_fn(t.grad)
        if len(grads) != len(node.inputs):
            raise GraphError(f"op '{node.op_name}' returned {len(grads)} grads for {len(node.inputs)} inputs")
        for inp, g in zip(node.inputs, grads):
            if g is None:
                continue
            if not (inp.requires_grad or inp.node is not None):
                continue
            if g.shape != inp.data.shape:
                raise ShapeError(
                    f"op '{node.op_name}' produced gradient shape {g.shape} for input shape {inp.data.shape}"
                )
            inp.grad = _accumulate(inp.grad, g)


def _accumulate(existing: Optional[np.ndarray], g: np.ndarray) -> np.ndarray:
    if existing is None:
        return g.copy() if not g.flags.owndata else g
    return existing + g
