"""Dense tensors and the reverse-mode tape.

A :class:`Tensor` wraps a read-only numpy array. Operations from
:mod:`conceptfuse.core.ops` record themselves on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient; with no
active tape nothing is recorded, which is how inference stays cheap.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator

import numpy as np

_state = threading.local()

# op name -> rule(saved, grad_out, inputs, output) -> tuple of input grads (or None)
BACKWARD_RULES: dict[str, Callable[..., tuple]] = {}


class NonFiniteError(FloatingPointError):
    """Raised as soon as a NaN or Inf appears in a forward value or gradient."""


class ShapeError(ValueError):
    pass


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=default_dtype())
        check_finite(arr, name or "Tensor()")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, where: str) -> "Tensor":
        check_finite(arr, where)
        out = cls.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.name = None
        return out

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, "detach")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; the functional forms live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, ops.as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, ops.as_tensor(other))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(ops.as_tensor(other), self)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, ops.as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _raise_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: Any


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order, so the list is
    topologically sorted by construction.
    """

    def __init__(self) -> None:
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, saved: Any) -> None:
        self.records.append(Record(op, inputs, output, saved))

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording even if an outer tape is active."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owners: dict[int, Tensor] = {id(root): root}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        owners.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = BACKWARD_RULES[rec.op](rec.saved, g, rec.inputs, rec.output)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"{rec.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            check_finite(gi, f"backward of {rec.op}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = inp
    # whatever is left was never produced on this tape: leaves
    for key, g in grads.items():
        leaf = owners[key]
        if not leaf.requires_grad:
            continue
        g = np.asarray(g, dtype=leaf.data.dtype)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
