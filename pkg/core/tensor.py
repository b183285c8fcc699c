"""Dense tensors and the reverse-mode tape.

Every differentiable operation lives in `core.ops`; it computes its value
with numpy and, when a tape is active and an input requires gradients,
records a node holding a vector-Jacobian closure. `backward` replays the
nodes of one tape in reverse order.
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from core.exceptions import ConfigError, GraphError, NumericError
from core.settings import settings

logger = logging.getLogger(__name__)

_DTYPES = {32: np.float32, 64: np.float64}
_default_bits = settings.default_precision if settings.default_precision in _DTYPES else 32
_local = threading.local()


def set_default_precision(bits: int) -> None:
    global _default_bits
    if bits not in _DTYPES:
        raise ConfigError(f"precision must be 32 or 64, got {bits}")
    _default_bits = bits


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPES[_default_bits])


@contextmanager
def precision(bits: int) -> Iterator[None]:
    previous = _default_bits
    set_default_precision(bits)
    try:
        yield
    finally:
        set_default_precision(previous)


VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Node:
    __slots__ = ("inputs", "output", "vjp", "tape")

    def __init__(self, inputs: Tuple["Tensor", ...], output: "Tensor", vjp: VJP, tape: "Tape"):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.tape = tape


class Tape:
    """Ordered record of executed operations.

    Entering the tape makes it the active tape of the current thread; tapes
    nest, the innermost one records.
    """

    def __init__(self) -> None:
        self._nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, inputs: Tuple["Tensor", ...], output: "Tensor", vjp: VJP) -> None:
        node = Node(inputs, output, vjp, self)
        output._node = node
        self._nodes.append(node)

    def clear(self) -> None:
        for node in self._nodes:
            if node.output._node is node:
                node.output._node = None
        self._nodes = []

    def nodes(self) -> Sequence[Node]:
        return tuple(self._nodes)


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar; the math lives in core.ops
    def __add__(self, other):
        from core import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from core import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from core import ops
        return ops.div(self, other)

    def __neg__(self):
        from core import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from core import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from core import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from core import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from core import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from core import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def check_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {what}")


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Populate `.grad` of every leaf tensor that requires gradients.

    Gradients accumulate into existing `.grad` buffers, so calling this twice
    without zeroing doubles them. Returns the leaf gradients keyed by id.
    """
    if loss.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    node = loss._node
    if node is None or node.tape is not tape:
        raise GraphError("loss was not produced on this tape")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape._nodes):
        upstream = pending.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.vjp(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = pending[key] + grad
            else:
                pending[key] = grad
            if tensor._node is None:
                leaves[key] = tensor

    result: Dict[int, np.ndarray] = {}
    for key, tensor in leaves.items():
        grad = pending[key].astype(tensor.dtype, copy=False)
        check_finite(grad, f"gradient of {tensor.name or 'tensor'}")
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        result[key] = tensor.grad
    return result
