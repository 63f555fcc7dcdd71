"""Dense tensors with tape-based reverse-mode differentiation.

Every tensor wraps a row-major numpy array. Operations executed while a
:class:`Tape` is active, and that touch at least one tensor with
``requires_grad``, are recorded; :func:`backward` replays the tape in reverse.
Backward rules live in the module-level ``BACKWARD`` registry and are looked up
at replay time, so a single rule can be swapped out (e.g. by a test fixture).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

PRECISIONS = {"standard": np.float32, "wide": np.float64}


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def dtype_for(precision: str) -> type:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    ctx: Any = None


@dataclass
class Tape:
    """Ordered log of differentiable operations for one forward pass."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


BACKWARD: dict[str, Callable[[np.ndarray, Record], Sequence[np.ndarray | None]]] = {}


def _rule(name: str):
    def register(fn):
        BACKWARD[name] = fn
        return fn

    return register


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], ctx: Any = None) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(Record(op, out, inputs, ctx))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("add", a.data + b.data, (a, b))


@_rule("add")
def _add_backward(g, rec):
    a, b = rec.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("sub", a.data - b.data, (a, b))


@_rule("sub")
def _sub_backward(g, rec):
    a, b = rec.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("mul", a.data * b.data, (a, b))


@_rule("mul")
def _mul_backward(g, rec):
    a, b = rec.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,))


@_rule("neg")
def _neg_backward(g, rec):
    return (-g,)


def tanh(a: Tensor) -> Tensor:
    return _emit("tanh", np.tanh(a.data), (a,))


@_rule("tanh")
def _tanh_backward(g, rec):
    y = rec.out.data
    return (g * (1 - y * y),)


def sigmoid(a: Tensor) -> Tensor:
    half = a.data.dtype.type(0.5)
    return _emit("sigmoid", half * (np.tanh(half * a.data) + 1), (a,))


@_rule("sigmoid")
def _sigmoid_backward(g, rec):
    y = rec.out.data
    return (g * y * (1 - y),)


def exp(a: Tensor) -> Tensor:
    return _emit("exp", np.exp(a.data), (a,))


@_rule("exp")
def _exp_backward(g, rec):
    return (g * rec.out.data,)


def log(a: Tensor) -> Tensor:
    return _emit("log", np.log(a.data), (a,))


@_rule("log")
def _log_backward(g, rec):
    return (g / rec.inputs[0].data,)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``rng=None`` (evaluation mode) returns ``a`` untouched."""
    if rng is None or rate <= 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep).astype(a.dtype) / a.dtype.type(keep)
    return _emit("dropout", a.data * mask, (a,), mask)


@_rule("dropout")
def _dropout_backward(g, rec):
    return (g * rec.ctx,)


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value``; those entries get no gradient."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), a.shape)
    return _emit("masked_fill", np.where(keep, a.data, a.dtype.type(value)), (a,), keep)


@_rule("masked_fill")
def _masked_fill_backward(g, rec):
    return (np.where(rec.ctx, g, 0).astype(g.dtype),)


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a [..., m, k] @ b [k, n]``; leading dims of ``a`` are treated as a batch."""
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b))


@_rule("matmul")
def _matmul_backward(g, rec):
    a, b = rec.inputs
    da = g @ b.data.T
    a2 = a.data.reshape(-1, a.shape[-1])
    db = a2.T @ g.reshape(-1, g.shape[-1])
    return da, db


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", np.ascontiguousarray(a.data.T), (a,))


@_rule("transpose")
def _transpose_backward(g, rec):
    return (g.T,)


# --------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _emit("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), (axis, keepdims))


@_rule("sum")
def _sum_backward(g, rec):
    (a,) = rec.inputs
    axis, keepdims = rec.ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), a.dtype.type(1.0 / count))


# --------------------------------------------------------------- reshaping


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit("reshape", a.data.reshape(shape), (a,))


@_rule("reshape")
def _reshape_backward(g, rec):
    return (g.reshape(rec.inputs[0].shape),)


def getitem(a: Tensor, index) -> Tensor:
    return _emit("getitem", np.array(a.data[index]), (a,), index)


@_rule("getitem")
def _getitem_backward(g, rec):
    (a,) = rec.inputs
    full = np.zeros_like(a.data)
    if _is_basic_index(rec.ctx):
        full[rec.ctx] = g
    else:
        np.add.at(full, rec.ctx, g)
    return (full,)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    return _emit("concat", data, tuple(tensors), (axis, sizes))


@_rule("concat")
def _concat_backward(g, rec):
    axis, sizes = rec.ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return _emit("stack", np.stack([t.data for t in tensors], axis=axis), tuple(tensors), axis)


@_rule("stack")
def _stack_backward(g, rec):
    axis = rec.ctx
    return tuple(np.take(g, i, axis=axis) for i in range(len(rec.inputs)))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")
    return _emit("embedding", table.data[ids], (table,), ids)


@_rule("embedding")
def _embedding_backward(g, rec):
    (table,) = rec.inputs
    full = np.zeros_like(table.data)
    np.add.at(full, rec.ctx.reshape(-1), g.reshape(-1, table.shape[1]))
    return (full,)


# --------------------------------------------------------- softmax and loss


def softmax_array(v: np.ndarray, axis: int = -1) -> np.ndarray:
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    return _emit("softmax", softmax_array(v.data, axis), (v,), axis)


@_rule("softmax")
def _softmax_backward(g, rec):
    p = rec.out.data
    axis = rec.ctx
    return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)


def log_softmax_array(v: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy_loss(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``.

    Rows whose target equals ``ignore_index`` are left out of both the sum
    and the count.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_loss expects [T, V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    rows, vocab = logits.shape
    if targets.shape[0] != rows:
        raise ShapeError(f"{rows} logit rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range for vocabulary of {vocab}")
    weight = np.ones(rows, dtype=logits.dtype)
    if ignore_index is not None:
        weight[targets == ignore_index] = 0
    count = max(weight.sum(), 1)
    logp = log_softmax_array(logits.data)
    nll = -logp[np.arange(rows), targets]
    loss = np.asarray((nll * weight).sum() / count, dtype=logits.dtype)
    return _emit("cross_entropy", loss, (logits,), (logp, targets, weight / count))


@_rule("cross_entropy")
def _cross_entropy_backward(g, rec):
    logp, targets, weight = rec.ctx
    grad = np.exp(logp)
    grad[np.arange(len(targets)), targets] -= 1
    return (grad * (weight[:, None] * g),)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` for every ``requires_grad`` tensor reachable from ``loss``.

    Gradients accumulate into existing ``grad`` buffers; clear them with
    :func:`zero_grad` between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        grads = BACKWARD[rec.op](g, rec)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.dtype)
            inp.grad = gi if inp.grad is None else inp.grad + gi
        if rec.out is not loss:
            rec.out.grad = None


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def _oracle_dtype():
    # 80-bit extended floats where the platform has them, float64 otherwise
    return np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


def grad_check(
    function: Callable[..., Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    extended: bool = True,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``function(*params)`` must return a scalar tensor and be deterministic.
    The error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. Analytic
    gradients are taken at the parameters' own precision; with ``extended``
    the finite differences are evaluated on extended-precision copies so the
    oracle's rounding noise stays well below the 1e-8 floor.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    first_out = function(*params)
    if first_out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {first_out.shape}")
    first, second = first_out.item(), function(*params).item()
    if first != second:
        raise ContractError(f"function is not deterministic: {first!r} != {second!r}")

    zero_grad(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = function(*params)
    backward(loss, tape)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

    saved = [p.data for p in params]
    dtype = _oracle_dtype() if extended else None
    if dtype is not None:
        for p in params:
            p.data = p.data.astype(dtype)
    step = (dtype or np.float64)(epsilon)
    worst = 0.0
    try:
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                plus = function(*params).data.reshape(())
                flat[i] = orig - step
                minus = function(*params).data.reshape(())
                flat[i] = orig
                numeric = float((plus - minus) / (2 * step))
                a = grad.reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    finally:
        for p, data, flag in zip(params, saved, flags):
            p.data = data
            p.requires_grad = flag
    return worst
