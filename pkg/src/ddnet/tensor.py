"""Rank-4 tensors with tape-based reverse-mode differentiation.

Every differentiable operation in the package is built on :func:`record`:
it computes the forward result with numpy, then appends a node holding the
inputs, the output and a backward closure to the current thread's tape.
:func:`backward` replays that tape in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class NumericError(ArithmeticError, ValueError):
    """A non-finite value appeared where finite values are required."""


class Tensor:
    """Dense (n, c, h, w) array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ShapeError(f"Tensor expects rank 4, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype}{flag})"


class Parameter(Tensor):
    """A named, trainable tensor."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, dims={self.dims})"


@dataclass
class Node:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    enabled: bool = True

    def clear(self) -> None:
        self.nodes.clear()


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    """Disable recording on this thread's tape."""
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def record(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` in a tensor and register its backward rule.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input,
    each shaped like that input's data.
    """
    result = Tensor(out)
    tape = get_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = Node(name, tuple(inputs), result, backward_fn)
        result._node = node
        tape.nodes.append(node)
    return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape.

    Leaves that sit on the tape but receive no gradient end up with a zero
    grad. The tape is cleared afterwards.
    """
    if loss.dims != (1, 1, 1, 1):
        raise ValueError(f"backward needs a (1,1,1,1) loss, got {loss.dims}")
    tape = get_tape()
    if not tape.nodes:
        raise ValueError("backward called on an empty tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    try:
        for node in reversed(tape.nodes):
            for t in node.inputs:
                if t.requires_grad and t.is_leaf:
                    leaves[id(t)] = t
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
    finally:
        tape.clear()


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{op}: dims {a.dims} and {b.dims} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    return record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _logistic(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _logistic(a.data)
    # float32 saturates to exactly 0 or 1 for |x| > ~17
    tiny = np.finfo(a.dtype).tiny
    y = np.clip(y, tiny, np.nextafter(a.dtype.type(1), a.dtype.type(0)))
    return record("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None, factor: float = 1.0) -> Tensor:
    """Dispatch by name: add, mul, sub, scale, relu, sigmoid."""
    binary = {"add": add, "mul": mul, "sub": sub}
    if kind in binary:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return binary[kind](a, b)
    if kind == "scale":
        return scale(a, factor)
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown elementwise op {kind!r}")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    n, _, h, w = parts[0].dims
    for p in parts[1:]:
        if (p.dims[0], p.dims[2], p.dims[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {p.dims} incompatible with {parts[0].dims}")
    bounds = np.cumsum([0] + [p.dims[1] for p in parts])

    def back(g):
        return [g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    return record("concat_channels", np.concatenate([p.data for p in parts], axis=1), parts, back)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=a.dtype).reshape(1, 1, 1, 1)
    return record("sum", out, (a,), lambda g: (np.broadcast_to(g, a.dims).copy(),))


def mean_all(a: Tensor) -> Tensor:
    size = a.data.size
    out = (a.data.sum(dtype=a.dtype) / size).reshape(1, 1, 1, 1)
    return record("mean", out, (a,), lambda g: (np.full(a.dims, g.reshape(-1)[0] / size, dtype=a.dtype),))
