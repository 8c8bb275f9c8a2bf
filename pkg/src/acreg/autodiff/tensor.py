"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays of rank 0 to 4 in the fixed (batch, height,
width, channel) layout convention. Operations executed while a Tape is
open are recorded in execution order; ``backward`` replays the tape in
exact reverse order, accumulating gradients into every tensor that was
created with ``requires_grad=True``.

Production code runs in float32. Gradient verification builds the same
graph in float64 by passing ``dtype=np.float64`` at tensor creation;
operations follow numpy's type promotion, so a float64 graph stays
float64 throughout.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32

_MAX_RANK = 4


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Tape misuse: backward without a tape, or a second backward."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def current_tape():
    """The innermost open Tape of this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Used as a context manager; ops executed inside the ``with`` block
    are recorded in execution order. A tape is consumed by exactly one
    backward pass. Independent tapes on different threads do not share
    state.
    """

    __slots__ = ("_nodes", "_consumed")

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, node: "_Node") -> None:
        if self._consumed:
            raise TapeError("tape was already consumed by a backward pass")
        self._nodes.append(node)


class _Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tensor:
    """A rank <= 4 real array with an additive gradient accumulator.

    ``grad`` reads as a same-shape zero array until a backward pass
    deposits into it. Tensors with ``requires_grad=False`` are never
    written to by backward. Values are immutable by convention once the
    tensor has entered a graph; only ``grad`` and in-place optimizer
    updates on leaf parameters mutate state.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim > _MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum {_MAX_RANK}")
        if arr.size == 0:
            raise ShapeError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._tape = None

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out._grad = None
        out._tape = None
        return out

    # -- basic introspection ------------------------------------------------

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

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flags})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self._grad += g

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap a constant as a non-grad tensor, matching ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def apply_op(data: np.ndarray, inputs, backward) -> Tensor:
    """Create an op output and record it on the open tape.

    ``backward(out_grad)`` must return one gradient array (or None) per
    input, in order. Recording happens only when a tape is open and at
    least one input requires grad; otherwise the op runs as a pure
    evaluation.
    """
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._result(data, requires_grad)
    tape = current_tape()
    if tape is not None and requires_grad:
        tape._record(_Node(tuple(inputs), out, backward))
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Reverse-sweep the tape that recorded ``loss``.

    After the sweep every requires_grad tensor reachable from ``loss``
    holds d(loss)/d(tensor), accumulated additively across all of its
    uses. The tape is consumed and cannot be swept again.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on an open tape")
    if tape._consumed:
        raise TapeError("tape was already consumed by a backward pass")
    tape._consumed = True
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(tape._nodes):
        out_grad = node.out._grad
        if out_grad is None:
            continue  # not on any path to the loss
        grads = node.backward(out_grad)
        for inp, g in zip(node.inputs, grads):
            if g is not None and inp.requires_grad:
                inp._accumulate(g)


# -- broadcasting helpers ---------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return apply_op(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return apply_op(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return apply_op(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb
    return apply_op(a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant real exponent."""
    p = float(exponent)
    def bwd(g):
        return (g * p * np.power(a.data, p - 1.0),)
    return apply_op(np.power(a.data, p), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return apply_op(out_data, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    return apply_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return apply_op(out_data, (a,), lambda g: (g / (2.0 * out_data),))


def absolute(a: Tensor) -> Tensor:
    """Elementwise |x| with subgradient 0 at exact zeros."""
    return apply_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 strictly inside, 0 outside."""
    mask = (a.data >= lo) & (a.data <= hi)
    def bwd(g):
        return (g * mask,)
    return apply_op(np.clip(a.data, lo, hi), (a,), bwd)


# -- reductions and structure ----------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)
    return apply_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape[1]} vs {b.shape[0]}")
    def bwd(g):
        return g @ b.data.T, a.data.T @ g
    return apply_op(a.data @ b.data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    new_shape = tuple(shape)
    def bwd(g):
        return (g.reshape(a.shape),)
    return apply_op(a.data.reshape(new_shape), (a,), bwd)


def take_slice(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing; backward scatters into a zero array."""
    out_data = a.data[key]
    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)
    return apply_op(np.ascontiguousarray(out_data), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=axis))
    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)
