"""Dense float64 tensors with a single-use reverse-mode tape."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an autodiff precondition is violated."""


@dataclass
class Node:
    op: str
    inputs: Tuple["Tensor", ...]
    backward: BackwardFn


class Tape:
    """Append-only record of primitive applications.

    Nodes are appended in evaluation order, so the list is already
    topologically sorted. The tape is consumed by :func:`backward` and then
    cleared; tensors recorded on a cleared tape behave as constants.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence["Tensor"], data: np.ndarray,
               backward_fn: BackwardFn) -> "Tensor":
        out = Tensor(data, requires_grad=True)
        out.node_id = (self.generation, len(self.nodes))
        self.nodes.append(Node(op, tuple(inputs), backward_fn))
        return out

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1


_state = threading.local()


def _tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def active_tape() -> Tape:
    """Return the calling thread's tape."""
    return _tape()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None) -> None:
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[Tuple[int, int]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the differentiable work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.scale(self, -1.0), other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        from . import ops
        return ops.scale(self, 1.0 / float(other))

    def sum(self) -> "Tensor":
        from . import ops
        return ops.sum(self)

    def mean(self) -> "Tensor":
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _not_scalar(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def is_tracked(t: Tensor) -> bool:
    """True when gradients must flow into ``t`` on the current tape."""
    if not t.requires_grad:
        return False
    return t.node_id is None or t.node_id[0] == _tape().generation


def record(op: str, inputs: Sequence[Tensor], data: np.ndarray,
           backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording it when any input is tracked."""
    if grad_enabled() and any(is_tracked(t) for t in inputs):
        return _tape().record(op, inputs, data, backward_fn)
    return Tensor(data)


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(.) into every tracked leaf reachable from ``loss``.

    Gradients accumulate additively into ``leaf.grad``. The tape is cleared
    afterwards, whatever happens.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape()
    try:
        if not is_tracked(loss):
            raise ContractError("loss was not produced on the active tape")
        seed = np.ones_like(loss.data)
        if loss.node_id is None:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        grads: dict[int, np.ndarray] = {loss.node_id[1]: seed}
        for idx in range(loss.node_id[1], -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = tape.nodes[idx]
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not is_tracked(inp):
                    continue
                if inp.node_id is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    j = inp.node_id[1]
                    grads[j] = ig.copy() if j not in grads else grads[j] + ig
    finally:
        tape.clear()
