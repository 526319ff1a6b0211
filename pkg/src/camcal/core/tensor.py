"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy array. Every operation on tensors that
require gradients records a node; node ids grow in construction order, so
replaying the reachable nodes by descending id is a valid reverse
topological order. Gradients accumulate additively on leaves until
zero_grad() is called.
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .models import InvalidArgumentError

_state = threading.local()
_node_ids = itertools.count()


def default_dtype() -> np.dtype:
    """32-bit unless a float64_mode() block is active on this thread."""
    return getattr(_state, "dtype", np.dtype(np.float32))


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def float64_mode() -> Iterator[None]:
    """Create tensors in double precision (gradient checks only)."""
    previous = default_dtype()
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = previous


@dataclass
class Node:
    """One recorded operation."""
    id: int
    op: str
    parents: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class GradTape:
    """Nodes reachable from a loss, in reverse construction order."""
    nodes: List[Node] = field(default_factory=list)

    @classmethod
    def collect(cls, root: "Tensor") -> "GradTape":
        seen = set()
        stack = [root._node] if root._node is not None else []
        nodes = []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen.add(node.id)
            nodes.append(node)
            for parent in node.parents:
                if parent._node is not None and parent._node.id not in seen:
                    stack.append(parent._node)
        nodes.sort(key=lambda n: n.id, reverse=True)
        return cls(nodes)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


Operand = Union["Tensor", np.ndarray, float, int]


class Tensor:
    """An n-dimensional real array that may take part in the gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.array(data, dtype=dtype if dtype is not None else default_dtype(), copy=True)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(data)
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
        op: str,
    ) -> "Tensor":
        """Create an op output, recording a node when any parent needs gradients."""
        out = cls._wrap(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._node = Node(next(_node_ids), op, tuple(parents), backward)
        return out

    # Properties

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def backward(self) -> None:
        backward(self)

    # Arithmetic

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Operand) -> "Tensor":
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other: Operand) -> "Tensor":
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Operand) -> "Tensor":
        return mul(self, reciprocal(as_tensor(other, self.dtype)))

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return mul(as_tensor(other, self.dtype), reciprocal(self))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(value: Operand, dtype=None) -> Tensor:
    """Wrap arrays and scalars as constant tensors."""
    if isinstance(value, Tensor):
        return value
    dtype = dtype if dtype is not None else default_dtype()
    return Tensor._wrap(np.asarray(value, dtype=dtype))


def parameter(data) -> Tensor:
    """A leaf tensor that requires gradients."""
    return Tensor(data, requires_grad=True)


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from a scalar loss.

    Raises:
        InvalidArgumentError: If the loss is not a scalar or is not on the tape
    """
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise InvalidArgumentError("loss does not participate in the gradient tape")
    if loss._node is None:
        _accumulate(loss, np.ones_like(loss.data))
        return

    pending: Dict[int, np.ndarray] = {loss._node.id: np.ones_like(loss.data)}
    for node in GradTape.collect(loss).nodes:
        grad_out = pending.pop(node.id, None)
        if grad_out is None:
            continue
        grads = node.backward(grad_out)
        for parent, grad in zip(node.parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            grad = _unbroadcast(np.asarray(grad), parent.shape)
            if parent._node is None:
                _accumulate(parent, grad)
            elif parent._node.id in pending:
                pending[parent._node.id] = pending[parent._node.id] + grad
            else:
                pending[parent._node.id] = grad


def _accumulate(leaf: Tensor, grad: np.ndarray) -> None:
    grad = grad.astype(leaf.dtype, copy=False)
    if leaf.grad is None:
        leaf.grad = grad.copy()
    else:
        leaf.grad = leaf.grad + grad


# Elementwise ops


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Operand, b: Operand) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return Tensor.from_op(
        a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul"
    )


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor.from_op(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    # out * (1 - out) loses its relative precision once out rounds towards 1.
    slope = (z / (1.0 + z) ** 2).astype(x.dtype)
    return Tensor.from_op(out, (a,), lambda g: (g * slope,), "sigmoid")


# Reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor.from_op(np.asarray(out, dtype=a.dtype), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return Tensor.from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def transpose(a: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))
    return Tensor.from_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def getitem(a: Tensor, index) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(np.array(a.data[index]), (a,), grad_fn, "getitem")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        ]

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(data, tensors, grad_fn, "concatenate")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concatenate(expanded, axis)


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product; 1-D operands act as vectors as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise InvalidArgumentError("matmul needs at least 1-D operands")
    if (a.ndim == 1 and b.ndim > 2) or (b.ndim == 1 and a.ndim > 2):
        raise InvalidArgumentError("batched matmul needs matrix operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise InvalidArgumentError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        if a.ndim == 1:
            return b.data @ g, np.outer(a.data, g)
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(np.matmul(a.data, b.data), (a, b), grad_fn, "matmul")


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# Gradient checking


def numerical_gradient(
    fn: Callable[[], Tensor], param: Tensor, h: float = 1e-3
) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. `param`."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = float(fn().data.sum())
            flat[i] = original - h
            minus = float(fn().data.sum())
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    rtol: float = 1e-3,
    reference_float64: bool = False,
) -> Dict[int, float]:
    """Compare analytic and numerical gradients parameter by parameter.

    With reference_float64 the analytic gradient keeps the parameters' own
    precision while the finite differences are taken on float64 copies of the
    parameters inside float64_mode(). fn must then build its constants from
    numpy arrays so they follow the active precision.

    Returns:
        Index of each parameter -> relative error max|a - n| / max(max|a|, max|n|)

    Raises:
        AssertionError: If any relative error exceeds rtol
    """
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [
        np.zeros(p.shape, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        for p in params
    ]
    if reference_float64:
        with _promoted(params):
            numeric = [numerical_gradient(fn, p, h) for p in params]
    else:
        numeric = [numerical_gradient(fn, p, h) for p in params]
    errors = {}
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
        errors[i] = float(np.abs(a - n).max() / scale)
    bad = {i: e for i, e in errors.items() if e >= rtol}
    assert not bad, f"gradient mismatch (relative error per parameter): {bad}"
    return errors


@contextmanager
def _promoted(params: Sequence[Tensor]) -> Iterator[None]:
    """Swap each parameter's data for a float64 copy and enter float64_mode()."""
    originals = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
        with float64_mode():
            yield
    finally:
        for p, data in zip(params, originals):
            p.data = data
