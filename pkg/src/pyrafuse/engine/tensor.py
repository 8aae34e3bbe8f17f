"""Dense float tensors plus a recording tape for reverse-mode differentiation.

A single tape is active per process. Ops append a node (inputs, output,
backward rule) while recording is enabled; `backward` replays the record in
reverse. Training code calls `reset_tape()` once per step so the record does
not grow without bound; `no_grad()` suspends recording for inference and for
finite-difference sweeps.

float32 is the working precision for training, float64 for verification.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError, UsageError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    if arr.ndim == 0:
        return arr  # ascontiguousarray would promote 0-d to shape (1,)
    return np.ascontiguousarray(arr)


class Tensor:
    """N-d float array that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar; the functions live below / in ops.py.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, other)


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.enabled = True

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()


def active_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    _tape.reset()


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _tape.enabled
        _tape.enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape.enabled = self._prev
        return False


def recording() -> bool:
    return _tape.enabled


def result_requires_grad(*inputs) -> bool:
    return _tape.enabled and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)


def record(op: str, inputs: Sequence[Tensor], output: Tensor,
           backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    if _tape.enabled and output.requires_grad:
        _tape.nodes.append(TapeNode(op, tuple(inputs), output, backward_fn))
    return output


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable requires_grad tensor.

    Each call contributes one full pass; grads are not cleared here, so repeated
    calls accumulate. Scratch gradients flow through a per-call map so earlier
    passes cannot double-count.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(_tape.nodes):
        out_grad = flowing.get(id(node.output))
        if out_grad is None:
            continue  # not an ancestor of this loss
        grads = node.backward_fn(out_grad)
        for tensor, grad in zip(node.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.data.shape:
                raise ShapeError(
                    f"backward rule of {node.op!r} produced shape {grad.shape} "
                    f"for input of shape {tensor.data.shape}")
            key = id(tensor)
            held = flowing.get(key)
            if held is None:
                flowing[key] = np.array(grad, copy=True)  # rules may return shared views
                owners[key] = tensor
            else:
                held += grad
    for key, grad in flowing.items():
        tensor = owners[key]
        if not tensor.requires_grad:
            continue
        if tensor.grad is None:
            tensor.grad = grad
        else:
            tensor.grad = tensor.grad + grad


def broadcast_result_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce_operand(a, other):
    """Return `other` as ndarray in a dtype compatible with tensor `a`."""
    if isinstance(other, Tensor):
        return other
    arr = np.asarray(other, dtype=a.data.dtype)
    return arr


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_arr = _coerce_operand(a, b)
        out = Tensor(a.data + b_arr, requires_grad=result_requires_grad(a))
        return record("add", (a,), out, lambda g: (unbroadcast(g, a.shape),))
    broadcast_result_shape(a.shape, b.shape)
    out = Tensor(a.data + b.data, requires_grad=result_requires_grad(a, b))

    def bwd(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record("add", (a, b), out, bwd)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_arr = _coerce_operand(a, b)
        out = Tensor(a.data - b_arr, requires_grad=result_requires_grad(a))
        return record("sub", (a,), out, lambda g: (unbroadcast(g, a.shape),))
    broadcast_result_shape(a.shape, b.shape)
    out = Tensor(a.data - b.data, requires_grad=result_requires_grad(a, b))

    def bwd(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record("sub", (a, b), out, bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=result_requires_grad(a))
    return record("neg", (a,), out, lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    broadcast_result_shape(a.shape, b.shape)
    out = Tensor(a.data * b.data, requires_grad=result_requires_grad(a, b))

    def bwd(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s, requires_grad=result_requires_grad(a))
    return record("scale", (a,), out, lambda g: (g * s,))
