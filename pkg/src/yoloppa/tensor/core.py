"""Dense tensor with a reverse-mode gradient tape.

Tensors wrap a contiguous numpy buffer in N×C×H×W order.  Every op that
touches a tensor with ``requires_grad`` records a node holding its parents and
an adjoint closure; :meth:`Tensor.backward` walks those nodes once in reverse
topological order and then consumes them.
"""

from __future__ import annotations

import contextlib
import enum
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class TensorError(ValueError):
    """Shape, dtype or argument violation in a tensor op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, double backward)."""


class Precision(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.SINGLE else np.float64)

    @classmethod
    def parse(cls, value) -> "Precision":
        if isinstance(value, Precision):
            return value
        if isinstance(value, np.dtype) or value in (np.float32, np.float64):
            return cls.SINGLE if np.dtype(value) == np.float32 else cls.DOUBLE
        aliases = {"single": cls.SINGLE, "float32": cls.SINGLE, "f32": cls.SINGLE,
                   "double": cls.DOUBLE, "float64": cls.DOUBLE, "f64": cls.DOUBLE}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise TensorError(f"unknown precision {value!r}") from None


class _State(threading.local):
    def __init__(self):
        self.precision = Precision.SINGLE
        self.grad_enabled = True


_state = _State()


def get_precision() -> Precision:
    return _state.precision


def default_dtype() -> np.dtype:
    return _state.precision.dtype


@contextlib.contextmanager
def precision(value) -> Iterator[Precision]:
    """Select the numeric precision for tensors created inside the block."""
    prev = _state.precision
    _state.precision = Precision.parse(value)
    try:
        yield _state.precision
    finally:
        _state.precision = prev


def set_precision(value) -> None:
    _state.precision = Precision.parse(value)


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """N-dimensional array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "_consumed", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        dt = np.dtype(dtype) if dtype is not None else default_dtype()
        arr = np.array(data, dtype=dt, copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor created with non-finite values")
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None
        self._consumed = False
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t._node = None
        t._consumed = False
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> Precision:
        return Precision.parse(self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff --------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        The loss must be a single-element tensor. Adjoints are summed over
        fan-out, and the tape is consumed afterwards, so a second call raises.
        """
        if self.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise TapeError("backward() already ran on this tape")
        if self._node is None and not self.requires_grad:
            raise TapeError("loss is not connected to any tensor requiring grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            node = t._node
            if node is None:
                if t.requires_grad and g is not None:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            t._node = None
            t._consumed = True
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._consumed = True

    # -- operator sugar (delegates to ops) ------------------------------
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

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        key = id(t)
        if expanded:
            order.append(t)
            continue
        if key in seen:
            continue
        seen.add(key)
        stack.append((t, True))
        node = t._node
        if node is not None:
            for p in node.parents:
                if p._consumed and p._node is None:
                    raise TapeError("graph reuses tensors from a tape that was already consumed")
                if id(p) not in seen and (p._node is not None or p.requires_grad):
                    stack.append((p, False))
    return order


def make_result(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording a tape node when any parent needs grad."""
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    t = Tensor._wrap(out, requires_grad=needs)
    if needs:
        t._node = _Node(op, tuple(parents), backward)
    return t


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dt = like.dtype if like is not None else None
    return Tensor(x, dtype=dt)
