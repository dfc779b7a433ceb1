"""Dense float64 tensors with tape-based reverse-mode differentiation.

Forward arithmetic is plain numpy on row-major float64 arrays.  While a
:class:`Tape` is active (``with Tape() as tape:``), every operation appends a
node recording its inputs and a closure that maps the output gradient to the
input gradients.  The tape is rebuilt on every forward pass; gradients are
exact reverse-mode derivatives obtained from a single reverse sweep.

Broadcasting is deliberately restricted to what the layers need: equal
shapes, scalars, and a trailing per-feature vector against a batch matrix.
Anything numpy cannot broadcast raises :class:`ShapeMismatchError`.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatchError",
    "active_tape",
    "backward",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "reduce_sum",
    "reduce_mean",
    "relu",
    "tanh",
    "sigmoid",
    "sqrt",
    "finite_difference_check",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes neither match nor broadcast."""


class Tensor:
    """Dense n-dimensional float64 array.

    ``requires_grad`` marks leaf parameters whose gradients are collected by
    :meth:`Tape.gradients`.  Construction always copies, so tensors behave as
    values and are safe to hand between threads.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, name=self.name)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, data={self.data!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("output", "inputs", "grad_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.grad_fn = grad_fn


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of one forward pass.

    Nodes are stored in construction order, so every node's inputs precede
    it and the backward sweep can walk the list once in reverse.  A tape is
    confined to the thread that created it.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tapes must be exited in LIFO order")
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable) -> None:
        self._nodes.append(_Node(output, inputs, grad_fn))

    def leaf_parameters(self) -> list[Tensor]:
        """Recorded leaves with ``requires_grad``, in first-use order."""
        outputs = {id(node.output) for node in self._nodes}
        seen: dict[int, Tensor] = {}
        for node in self._nodes:
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in outputs and id(inp) not in seen:
                    seen[id(inp)] = inp
        return list(seen.values())

    def gradients(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[Tensor, Tensor]:
        """Reverse-mode gradients of a scalar ``loss`` for each parameter.

        Parameters that do not influence the loss get zero gradients.  Each
        recorded node is visited exactly once.
        """
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar node, got shape {loss.shape}")
        accum: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            out_grad = accum.get(id(node.output))
            if out_grad is None:
                continue
            input_grads = node.grad_fn(out_grad)
            for inp, grad in zip(node.inputs, input_grads):
                if grad is None:
                    continue
                prev = accum.get(id(inp))
                accum[id(inp)] = grad if prev is None else prev + grad
        if params is None:
            params = self.leaf_parameters()
        result: dict[Tensor, Tensor] = {}
        for p in params:
            grad = accum.get(id(p))
            result[p] = Tensor(np.zeros_like(p.data)) if grad is None else Tensor(grad)
        return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of ``loss`` with respect to every leaf parameter on ``tape``."""
    return tape.gradients(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(output: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(output, inputs, grad_fn)
    return output


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = Tensor(a.data + b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def grad_fn(g):
        return (-g,)

    return _record(out, (a,), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out = Tensor(a.data * b.data)

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = Tensor(a.data / b.data)

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(out, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(
            f"matmul: expects two matrices, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner extents differ for shapes {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), grad_fn)


def _reduce(a, axis, np_fn, scale_fn):
    a = _as_tensor(a)
    if axis is not None and not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeMismatchError(f"reduce: axis {axis} out of range for shape {a.data.shape}")
    out = Tensor(np_fn(a.data, axis=axis))
    n = a.data.size if axis is None else a.data.shape[axis]
    scale = scale_fn(n)

    def grad_fn(g):
        if axis is None:
            return (np.full_like(a.data, float(g) * scale),)
        expanded = np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, a.data.shape) * scale,)

    return _record(out, (a,), grad_fn)


def reduce_sum(a, axis: int | None = None) -> Tensor:
    return _reduce(a, axis, np.sum, lambda n: 1.0)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    return _reduce(a, axis, np.mean, lambda n: 1.0 / n)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _record(out, (a,), grad_fn)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    out = Tensor(t)

    def grad_fn(g):
        return (g * (1.0 - t * t),)

    return _record(out, (a,), grad_fn)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _record(out, (a,), grad_fn)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    root = np.sqrt(a.data)
    out = Tensor(root)

    def grad_fn(g):
        return (g / (2.0 * root),)

    return _record(out, (a,), grad_fn)


def finite_difference_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Max relative error between central differences and taped gradients.

    ``f`` must re-evaluate the scalar loss from the parameters' current
    values on each call.  The perturbed evaluations run without a tape; the
    analytic gradient comes from one taped evaluation.  Relative error uses
    denominator ``max(|analytic|, 1e-8)`` per coordinate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with Tape() as tape:
        loss = f()
    analytic = tape.gradients(loss, params)
    worst = 0.0
    for p in params:
        grad_flat = analytic[p].data.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(fd - grad_flat[i]) / max(abs(grad_flat[i]), 1e-8)
            worst = max(worst, err)
    return worst
