"""
Dense tensors with reverse-mode differentiation.

Every op that touches a tensor requiring gradients records a ``TapeNode``
holding its inputs and a closure mapping the output gradient to input
gradients. Nodes carry a sequence number taken at creation, so sorting the
reachable nodes by it replays the forward order; ``backward`` walks that
order in reverse and visits each node once. There is no global graph: a tape
is whatever is reachable from the loss of one forward invocation.

Leaf gradients ACCUMULATE across ``backward`` calls; call ``zero_grad`` (or
``Module.zero_grad``) between optimisation steps.
"""
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import NumericError, ShapeError, ValidationError

_SEQUENCE = itertools.count()
_STATE = threading.local()
_DEFAULT_DTYPE = np.float64

_DTYPES = {"float64": np.float64, "float32": np.float32}


def set_default_dtype(name: str) -> None:
    """Switch the dtype new tensors get (``float64`` or ``float32``)."""
    global _DEFAULT_DTYPE
    try:
        _DEFAULT_DTYPE = _DTYPES[name]
    except KeyError as exc:
        raise ValidationError(f"Unsupported precision: {name}") from exc


def get_default_dtype():
    return _DEFAULT_DTYPE


def is_grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run the enclosed ops without recording them on a tape (thread local)."""
    previous = is_grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    seq: int = field(default_factory=lambda: next(_SEQUENCE))


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")
    # ndarray <op> Tensor must defer to the Tensor reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node: Optional[TapeNode] = None

    # -- introspection ----------------------------------------------------

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
        return self._node is None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operators --------------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False): return tensor_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)
    def exp(self): return exp(self)
    def log(self): return log(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self, tuple(reversed(range(self.ndim))))


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def _result(data: np.ndarray, op: str, inputs: Tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out.name = None
    out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out._node = TapeNode(op, inputs, grad_fn) if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcast to reach it from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    return _result(a.data / b.data, "div", (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * factor, "scale", (a,), lambda g: (g * factor,))


def neg(a: ArrayLike) -> Tensor:
    return scale(a, -1.0)


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _result(out, "pow", (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: ArrayLike) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), "softplus", (a,), lambda g: (g * _sigmoid(a.data),))


def silu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _result(a.data * s, "silu", (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(a: ArrayLike) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_K * (x + 0.044715 * x ** 3))

    def grad_fn(g):
        dt = (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(0.5 * x * (1.0 + t), "gelu", (a,), grad_fn)


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def grad_fn(g):
        return (_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
                _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(np.matmul(a.data, b.data), "matmul", (a, b), grad_fn)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), grad_fn)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tensor_sum(a, axes, keepdims), 1.0 / count)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows entirely at -inf are rejected upstream."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (a,), grad_fn)


def rmsnorm(x: ArrayLike, weight: Optional[ArrayLike] = None, eps: float = 1e-8) -> Tensor:
    """x / sqrt(mean(x^2) + eps) over the last axis, times ``weight``."""
    x = as_tensor(x)
    if weight is not None and as_tensor(weight).shape not in ((x.shape[-1],), ()):
        raise ShapeError(f"rmsnorm: weight {as_tensor(weight).shape} does not match {x.shape}")
    inv = power(add(mean(mul(x, x), axis=-1, keepdims=True), eps), -0.5)
    out = mul(x, inv)
    return mul(out, weight) if weight is not None else out


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def broadcast_to(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    return _result(out, "broadcast", (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], "getitem", (a,), grad_fn)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, "concat", tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}") from exc
    return _result(out, "stack", tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires gradients."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if not loss.requires_grad:
            raise ValidationError("backward: loss was not computed from any tensor requiring grad")
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    nodes = {}
    stack_: List[Tensor] = [loss]
    while stack_:
        node = stack_.pop()._node
        if node is None or id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack_.extend(node.inputs)

    pending = {id(loss._node): seed}
    for node in sorted(nodes.values(), key=lambda n: n.seq, reverse=True):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        for tensor, input_grad in zip(node.inputs, node.backward(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            if tensor._node is None:
                input_grad = np.asarray(input_grad, dtype=tensor.data.dtype).reshape(tensor.shape)
                tensor.grad = input_grad.copy() if tensor.grad is None else tensor.grad + input_grad
            else:
                key = id(tensor._node)
                pending[key] = input_grad if key not in pending else pending[key] + input_grad


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = None


def assert_finite(tensor: Union[Tensor, np.ndarray, float], what: str) -> None:
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{what} is not finite")


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              coords: Optional[int] = None, rng: Optional[np.random.Generator] = None,
              floor: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current values of ``inputs``.
    ``coords`` limits the check to that many random coordinates per input.
    """
    rng = rng or np.random.default_rng(0)
    zero_grads(inputs)
    backward(fn())
    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)
        flat = np.arange(tensor.size)
        if coords is not None and coords < tensor.size:
            flat = rng.choice(tensor.size, size=coords, replace=False)
        for position in flat:
            index = np.unravel_index(position, tensor.shape)
            original = tensor.data[index]
            with no_grad():
                tensor.data[index] = original + eps
                plus = float(fn().data)
                tensor.data[index] = original - eps
                minus = float(fn().data)
                tensor.data[index] = original
            numeric = (plus - minus) / (2 * eps)
            error = abs(analytic[index] - numeric) / max(abs(analytic[index]), abs(numeric), floor)
            worst = max(worst, error)
    zero_grads(inputs)
    return worst
