"""Dense float64 tensors and the operation tape used for reverse-mode differentiation."""

from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError

_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("nightstereo_active_tape", default=None)


class Tensor:
    """A float64 array with an optional gradient slot.

    Arithmetic dunders are thin aliases for the registered ops in
    :mod:`nightstereo.diffmath.ops`; every differentiable computation is
    recorded as an explicit node on the active :class:`Tape`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(data, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._leaf = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # sugar over registered ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class Node:
    """One recorded operation: inputs, output and the vector-Jacobian product."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block whose output
    requires a gradient are appended in execution order, which is a valid
    topological order by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._tokens = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def produced(self, t: Tensor) -> bool:
        return any(n.output is t for n in self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


class no_tape:
    """Suspend recording, e.g. for inference or finite-difference probes."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an op result and record it when any input requires a gradient."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._from_op(data, needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.record(Node(op, tuple(inputs), out, vjp))
    return out


class GradientMap:
    """Gradients keyed by tensor identity."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._tensors: dict[int, Tensor] = {}

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = np.array(g, dtype=np.float64, copy=True)
            self._tensors[key] = t

    def __getitem__(self, t: Tensor) -> np.ndarray:
        try:
            return self._grads[id(t)]
        except KeyError:
            return np.zeros_like(t.data)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())


def backward(loss: Tensor, tape: Tape) -> GradientMap:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Leaf tensors that require a gradient also get the result added to their
    ``.grad`` slot, so callers zero those between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires a gradient")
    if loss.is_leaf:
        grads = GradientMap()
        grads._accumulate(loss, np.ones_like(loss.data))
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return grads
    if not tape.produced(loss):
        raise ContractError("loss was not recorded on this tape")

    grads = GradientMap()
    grads._accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        g_out = grads._grads.get(id(node.output))
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.vjp(g_out)):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise ContractError(f"{node.op}: gradient shape {g.shape} != input shape {t.shape}")
            grads._accumulate(t, g)

    for t in grads.tensors():
        if t.is_leaf and t.requires_grad:
            g = grads[t]
            t.grad = g.copy() if t.grad is None else t.grad + g
    return grads
