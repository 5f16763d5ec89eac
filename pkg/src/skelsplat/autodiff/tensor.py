"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Operations on :class:`Tensor` objects are recorded on the innermost active
:class:`Tape`.  ``tape.backward(loss)`` walks the records in exact reverse
order and accumulates gradients into every leaf that requires them.

    with Tape() as tape:
        loss = (w @ x).sum()
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.op = op
        self.shapes = (a, b)


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _tape_stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.no_grad = 0
        _local.nonfinite = "propagate"
    return _local.tapes


def set_nonfinite_policy(policy: str) -> None:
    """``"propagate"`` (default) lets NaN/Inf flow; ``"error"`` raises at the producing op."""
    if policy not in ("propagate", "error"):
        raise ValueError(f"unknown non-finite policy {policy!r}")
    _tape_stack()
    _local.nonfinite = policy


def get_nonfinite_policy() -> str:
    _tape_stack()
    return _local.nonfinite


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    if not stack or _local.no_grad:
        return None
    return stack[-1]


@contextmanager
def no_grad():
    _tape_stack()
    _local.no_grad += 1
    try:
        yield
    finally:
        _local.no_grad -= 1


class _Record:
    __slots__ = ("out", "inputs", "vjp", "name")

    def __init__(self, out, inputs, vjp, name):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], vjp: Callable, name: str) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        out._tape = self
        self.records.append(_Record(out, tuple(inputs), vjp, name))

    def backward(self, output: "Tensor", grad: np.ndarray | None = None) -> None:
        if self.consumed:
            raise TapeError("backward() called twice on the same tape without reset()")
        if grad is None:
            if output.data.size != 1:
                raise TapeError(f"backward() needs a scalar output, got shape {output.shape}")
            grad = np.ones_like(output.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != output.shape:
                raise ShapeError("backward", grad.shape, output.shape)
        self.consumed = True
        if not output.requires_grad:
            return
        grads: dict[int, np.ndarray] = {}
        if output._tape is None:
            output._accumulate(grad)
            return
        grads[id(output)] = grad
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = _unbroadcast(np.asarray(ig, dtype=DTYPE), inp.shape)
                if inp._tape is None:
                    inp._accumulate(ig)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data.astype(DTYPE, copy=False)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced under an active tape")
        self._tape.backward(self, grad)

    # -- operators ---------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method sugar --------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def abs(self):
        return abs_(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return maximum(self, 0.0)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


class Parameter(Tensor):
    """Trainable leaf with a zero-initialised gradient."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def make_op(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, name: str) -> Tensor:
    """Wrap ``data`` as the output of a primitive and record it when a tape is active.

    ``vjp(g)`` must return one gradient (or ``None``) per input, each
    broadcast-compatible with that input.
    """
    data = np.asarray(data, dtype=DTYPE)
    if getattr(_local, "nonfinite", "propagate") == "error" and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {name}")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, vjp, name)
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("subtract", a, b)
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "subtract")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("multiply", a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "multiply")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(out, (a, b), lambda g: (g / bd, -g * out / bd), "divide")


def power(a, p) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, np.ndarray) and p.ndim > 0:
        p = Tensor(p)
    if isinstance(p, Tensor):
        _check_broadcast("power", a, p)
        ad, pd = a.data, p.data
        out = ad**pd
        return make_op(
            out,
            (a, p),
            lambda g: (g * pd * ad ** (pd - 1.0), g * out * np.log(np.where(ad > 0, ad, 1.0))),
            "power",
        )
    p = float(p)
    ad = a.data
    return make_op(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def maximum(a, c: float) -> Tensor:
    """max(a, c) for a constant ``c``; subgradient 0 at the kink."""
    a = as_tensor(a)
    mask = a.data > c
    return make_op(np.where(mask, a.data, c), (a,), lambda g: (g * mask,), "maximum")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return make_op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
        "where",
    )


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------
def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "negate")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_op(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_op(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return make_op(a.data.mean(axis=axes, keepdims=keepdims), (a,), vjp, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(np.atleast_1d(shape))) from None
    return make_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, tuple(shape)) from None
    return make_op(out, (a,), lambda g: (g,), "broadcast")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_op(a.data[idx], (a,), vjp, "index")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concatenate", ts[0].shape, tuple(t.shape for t in ts[1:])) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_op(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concatenate")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", ts[0].shape, tuple(t.shape for t in ts[1:])) from None
    n = len(ts)
    return make_op(out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting; 1-D operands are promoted."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (-1, 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_op(ad @ bd, (a, b), vjp, "matmul")


def linear_op(a, forward: Callable, adjoint: Callable, name: str) -> Tensor:
    """Record a fixed linear map ``forward`` whose adjoint is ``adjoint``."""
    a = as_tensor(a)
    return make_op(forward(a.data), (a,), lambda g: (adjoint(g),), name)
