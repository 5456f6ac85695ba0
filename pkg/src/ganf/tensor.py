"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (flows, the recurrent encoder, the DAG constraint)
is expressed in terms of the primitives defined here. Recording happens
only while a :class:`GradientTape` is active, so inference paths pay no
bookkeeping cost.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the primitive (e.g. log of x <= 0)."""


class NumericError(ArithmeticError):
    """NaN/Inf detected where finite values are required."""


class TapeStateError(RuntimeError):
    """Tape used in an invalid state (replayed twice, empty, nested)."""


_ACTIVE_TAPE: Optional["GradientTape"] = None


class Tensor:
    """A row-major float64 array plus gradient metadata."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["GradientTape"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def check_finite(self, context: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {context}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the recorded primitives
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __getitem__(self, key):
        return slice_(self, key)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _OpRecord:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class GradientTape:
    """Ordered record of primitive ops, replayed in reverse by :meth:`backward`.

    Use as a context manager around the forward pass. A tape may be
    replayed once; call :meth:`reset` to reuse it. Nested tapes are not
    supported.
    """

    def __init__(self):
        self._records: list[_OpRecord] = []
        self._consumed = False
        self._produced: set[int] = set()

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeStateError("nested gradient tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._records)

    def reset(self):
        self._records.clear()
        self._produced.clear()
        self._consumed = False

    def _append(self, record: _OpRecord):
        self._records.append(record)
        self._produced.add(id(record.output))

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
        if self._consumed:
            raise TapeStateError("tape already replayed; reset() before reuse")
        if not self._records:
            raise TapeStateError("tape is empty")
        if loss.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        self._consumed = True
        flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = flowing.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gin in zip(rec.inputs, rec.vjp(g)):
                if gin is None or not inp.requires_grad:
                    continue
                if id(inp) in self._produced:
                    prev = flowing.get(id(inp))
                    flowing[id(inp)] = gin if prev is None else prev + gin
                else:
                    inp.grad = gin.copy() if inp.grad is None else inp.grad + gin


def backward(loss: Tensor):
    """Replay the tape that recorded ``loss``."""
    if loss._tape is None:
        raise TapeStateError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def _emit(inputs: Sequence[Tensor], out_data: np.ndarray,
          vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _ACTIVE_TAPE is not None and out.requires_grad:
        out._tape = _ACTIVE_TAPE
        _ACTIVE_TAPE._append(_OpRecord(tuple(inputs), out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of broadcasting over leading axes)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _emit([a, b], a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _emit([a, b], a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit([a, b], ad * bd,
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _emit([a, b], np.matmul(ad, bd), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit([a], out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    ad = a.data
    return _emit([a], np.log(ad), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit([a], out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit([a], out, lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit([a], np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(ax % a.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit([a], out, vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(1.0 / float(count)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(moved[offsets[i]:offsets[i + 1]], 0, axis)
                     for i in range(len(tensors)))

    return _emit(tensors, out, vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _emit([a], out, vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _emit([a], out, lambda g: (g.reshape(a.shape),))


def flip(a: Tensor, axis: int = -1) -> Tensor:
    out = np.flip(a.data, axis=axis)
    return _emit([a], out.copy(), lambda g: (np.flip(g, axis=axis).copy(),))


def slice_(a: Tensor, key) -> Tensor:
    # basic (non-advanced) indexing only: slices and ints
    out = a.data[key]

    def vjp(g):
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return _emit([a], np.array(out, copy=True), vjp)


def no_tape_data(t: Tensor) -> np.ndarray:
    """The raw array, for numpy-side code that must not touch the tape."""
    return t.data
