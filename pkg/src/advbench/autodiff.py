"""Reverse-mode automatic differentiation over dense numpy arrays.

Gradients are recorded on an explicit tape. A forward pass runs inside a
``with Tape():`` block; ``backward(loss)`` then replays the recorded
operations in reverse and accumulates gradients into ``Tensor.grad``.
Outside a tape block (or inside ``no_grad()``) the same functions behave
like plain array code and record nothing.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "power",
    "matmul",
    "reshape",
    "concat",
    "tensor_sum",
    "tensor_mean",
    "amax",
]

# Stack of active tapes; ops record onto the innermost one. A None entry
# marks a no_grad region.
_TAPES: list["Tape | None"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


def _coerce(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        # Leaves eagerly hold zeros so a tensor that never reaches the loss
        # still reads as "gradient zero" after backward.
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._tape = None

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = object.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, False)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar; the free functions below do the real work.
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or not np.isscalar(other):
            raise TypeError("tensor division is only supported by a scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Record:
    """One executed op: inputs, output, and how to push gradients back."""

    __slots__ = ("op", "inputs", "output", "backward", "ctx")

    def __init__(self, op, inputs, output, backward_fn, ctx):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward_fn
        self.ctx = ctx


class Tape:
    """Ordered record of ops executed during one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited out of order")

    def __len__(self) -> int:
        return len(self.records)

    def zero_grad(self) -> None:
        """Drop every gradient this tape's ops touched."""
        outputs = {id(rec.output) for rec in self.records}
        for rec in self.records:
            rec.output.grad = None
            for t in rec.inputs:
                if id(t) not in outputs:
                    t.zero_grad()


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed ops."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def record(op: str, inputs: tuple, output: Tensor, backward_fn, ctx: dict | None = None) -> None:
    tape = _active_tape()
    if tape is not None and output.requires_grad:
        output._tape = tape
        tape.records.append(_Record(op, inputs, output, backward_fn, ctx or {}))


def _needs_grad(*tensors: Tensor) -> bool:
    if _active_tape() is None:
        return False
    return any(t.requires_grad for t in tensors)


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` for every tensor that
    participated in producing ``loss``.

    Gradients add onto whatever ``grad`` already holds, so calling twice
    doubles them; clear with ``zero_grad`` between passes.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    tape = loss._tape
    if tape is not None:
        for rec in reversed(tape.records):
            grad_out = pending.pop(id(rec.output), None)
            if grad_out is None:
                continue
            leaves.pop(id(rec.output), None)
            _deposit(rec.output, grad_out)
            for t, g in zip(rec.inputs, rec.backward(grad_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + g
                else:
                    pending[key] = g
                    leaves[key] = t
    for key, t in leaves.items():
        _deposit(t, pending[key])


def _deposit(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._result(a.data + b.data, _needs_grad(a, b))

    def bw(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    record("add", (a, b), out, bw)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._result(a.data - b.data, _needs_grad(a, b))

    def bw(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    record("sub", (a, b), out, bw)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._result(a.data * b.data, _needs_grad(a, b))

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    record("mul", (a, b), out, bw)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._result(-a.data, _needs_grad(a))
    record("neg", (a,), out, lambda g: (-g,))
    return out


def power(a, exponent) -> Tensor:
    if not np.isscalar(exponent):
        raise TypeError("power expects a scalar exponent")
    a = as_tensor(a)
    out = Tensor._result(a.data**exponent, _needs_grad(a))

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    record("power", (a,), out, bw, {"exponent": exponent})
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor._result(a.data @ b.data, _needs_grad(a, b))

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    record("matmul", (a, b), out, bw)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = Tensor._result(a.data.reshape(shape), _needs_grad(a))
    record("reshape", (a,), out, lambda g: (g.reshape(a.data.shape),))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ValueError("concat needs at least one tensor")
    out = Tensor._result(np.concatenate([p.data for p in parts], axis=axis), _needs_grad(*parts))
    splits = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    record("concat", tuple(parts), out, bw, {"axis": axis})
    return out


def _restore_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if not keepdims and axis is not None:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), _needs_grad(a))

    def bw(g):
        return (_restore_reduced(g, a.data.shape, axis, keepdims).copy(),)

    record("sum", (a,), out, bw, {"axis": axis})
    return out


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor._result(a.data.mean(axis=axis, keepdims=keepdims), _needs_grad(a))
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw(g):
        return (_restore_reduced(g, a.data.shape, axis, keepdims) / count,)

    record("mean", (a,), out, bw, {"axis": axis})
    return out


def amax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties route the gradient to the first maximum."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    picked = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    out_data = picked if keepdims else picked.squeeze(axis)
    out = Tensor._result(out_data, _needs_grad(a))

    def bw(g):
        gx = np.zeros_like(a.data)
        g_k = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g_k, axis=axis)
        return (gx,)

    record("amax", (a,), out, bw, {"axis": axis})
    return out
