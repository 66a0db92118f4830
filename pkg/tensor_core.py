#!/usr/bin/env python3
"""
Dense float64 tensors with a reverse-mode gradient tape

Every operation on a Tensor that requires gradients records a node (inputs +
backward rule) stamped with a global sequence number. backward() collects the
nodes reachable from the loss, orders them by sequence number and replays the
backward rules in exact reverse recording order, so gradient accumulation order
is fixed and runs are bit-reproducible.

Broadcasting covers scalar-with-tensor and equal shapes only;
reshape / tile / concat / indexing cover the rest.
"""

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, DimensionError, DomainError

Number = Union[int, float]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_sequence = itertools.count()


@dataclass
class _Node:
    seq: int
    inputs: Tuple["Tensor", ...]
    rule: BackwardRule
    op: str


@dataclass
class TapeRecord:
    seq: int
    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    rule: BackwardRule


class Tensor:
    """n-dimensional real array participating in the gradient tape"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._node: Optional[_Node] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered operations reachable from a loss, in recording order"""

    def __init__(self, operations: List[TapeRecord]):
        self.operations = operations

    def __len__(self) -> int:
        return len(self.operations)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen = set()
        records = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            node = t._node
            records.append(TapeRecord(node.seq, node.op, node.inputs, t, node.rule))
            stack.extend(node.inputs)
        records.sort(key=lambda r: r.seq)
        return cls(records)


def record(data: np.ndarray, inputs: Iterable[Tensor], rule: BackwardRule, op: str) -> Tensor:
    """Wrap a forward result and register its backward rule when any input needs gradients"""
    inputs = tuple(inputs)
    out = Tensor._wrap(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(next(_sequence), inputs, rule, op)
    return out


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


def _check_pair(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable "
                         f"(only scalar-with-tensor or equal shapes)")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def rule(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return record(out, (a, b), rule, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return record(a.data @ b.data, (a, b), rule, "matmul")


# ----------------------------------------------------------------- unary ops

def neg(t) -> Tensor:
    t = as_tensor(t)
    return record(-t.data, (t,), lambda g: (-g,), "neg")


def relu(t) -> Tensor:
    t = as_tensor(t)
    mask = t.data > 0
    return record(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,), "relu")


def tanh(t) -> Tensor:
    t = as_tensor(t)
    out = np.tanh(t.data)
    return record(out, (t,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    out = 0.5 * (1.0 + np.tanh(0.5 * t.data))
    return record(out, (t,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(t) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data <= 0):
        raise DomainError(f"log: {int(np.sum(t.data <= 0))} non-positive entries")
    return record(np.log(t.data), (t,), lambda g: (g / t.data,), "log")


def exp(t) -> Tensor:
    t = as_tensor(t)
    out = np.exp(t.data)
    return record(out, (t,), lambda g: (g * out,), "exp")


def square(t) -> Tensor:
    t = as_tensor(t)
    return record(t.data * t.data, (t,), lambda g: (2.0 * g * t.data,), "square")


def clamp(t, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; zero gradient strictly outside the interval"""
    t = as_tensor(t)
    inside = (t.data >= lo) & (t.data <= hi)
    return record(np.clip(t.data, lo, hi), (t,), lambda g: (g * inside,), "clamp")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid,
    "log": log, "exp": exp, "clamp": clamp,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op '{op}'") from None
    return fn(*args)


# ------------------------------------------------------------ reductions

def _normalize_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, t, axes=None) -> Tensor:
    t = as_tensor(t)
    if op not in ("sum", "mean"):
        raise ContractError(f"unknown reduction '{op}'")
    ax = _normalize_axes(axes, t.ndim)
    count = int(np.prod([t.shape[i] for i in ax])) if ax else 1
    out = t.data.sum(axis=ax) if ax else t.data.copy()
    if op == "mean":
        out = out / count

    def rule(g):
        g = np.asarray(g)
        if op == "mean":
            g = g / count
        return (np.broadcast_to(np.expand_dims(g, ax), t.shape).copy(),)

    return record(out, (t,), rule, op)


def sum(t, axes=None) -> Tensor:  # noqa: A001
    return reduce("sum", t, axes)


def mean(t, axes=None) -> Tensor:
    return reduce("mean", t, axes)


def logsumexp(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    (ax,) = _normalize_axes(axis, t.ndim)
    m = t.data.max(axis=ax, keepdims=True)
    shifted = np.exp(t.data - m)
    total = shifted.sum(axis=ax, keepdims=True)
    out = (m + np.log(total)).squeeze(ax)
    softmax = shifted / total

    def rule(g):
        return (np.expand_dims(g, ax) * softmax,)

    return record(out, (t,), rule, "logsumexp")


# ----------------------------------------------------------- shape ops

def reshape(t, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != t.data.size:
        raise DimensionError(f"reshape: {t.shape} has {t.data.size} entries, target {shape}")
    return record(t.data.reshape(shape), (t,), lambda g: (g.reshape(t.shape),), "reshape")


def transpose(t, axes: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    axes = tuple(axes)
    if sorted(axes) != list(range(t.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {t.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return record(t.data.transpose(axes), (t,), lambda g: (g.transpose(inverse),), "transpose")


def tile(t, reps: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    reps = tuple(int(r) for r in reps)
    if len(reps) != t.ndim:
        raise DimensionError(f"tile: {len(reps)} repetitions for a {t.ndim}-d tensor")

    def rule(g):
        interleaved = []
        for r, s in zip(reps, t.shape):
            interleaved.extend((r, s))
        return (g.reshape(interleaved).sum(axis=tuple(range(0, 2 * t.ndim, 2))),)

    return record(np.tile(t.data, reps), (t,), rule, "tile")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: nothing to concatenate")
    (ax,) = _normalize_axes(axis, tensors[0].ndim)
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        first = [s for i, s in enumerate(tensors[0].shape) if i != ax]
        if t.ndim != tensors[0].ndim or other != first:
            raise DimensionError(f"concat: {t.shape} does not match {tensors[0].shape} off axis {ax}")
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=ax))

    return record(np.concatenate([t.data for t in tensors], axis=ax), tensors, rule, "concat")


def index(t, key) -> Tensor:
    t = as_tensor(t)
    try:
        out = t.data[key]
    except IndexError as e:
        raise DimensionError(f"index: {e}") from None

    def rule(g):
        full = np.zeros_like(t.data)
        np.add.at(full, key, g)
        return (full,)

    return record(np.array(out, dtype=np.float64), (t,), rule, "index")


# ------------------------------------------------------------- backward

def backward(loss: Tensor):
    """Populate .grad of every requires_grad leaf reachable from a scalar loss"""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return

    tape = Tape.from_loss(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.operations):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for inp, ig in zip(rec.inputs, rec.rule(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                prev = pending.get(id(inp))
                pending[id(inp)] = ig if prev is None else prev + ig
