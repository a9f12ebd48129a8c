"""Define-by-run reverse-mode autodiff over dense 2-D arrays, plus Adam.

Every tensor is a 2-D float64 array; vectors are ``(n, 1)`` or ``(1, n)``.
Operations executed inside a :class:`Tape` context are recorded in order, and
:meth:`Tape.backward` replays them in reverse to accumulate gradients.  Outside
a tape the ops still evaluate, they just are not differentiable.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mean(square(x))
    >>> tape.backward(loss)[x]
    array([[1., 2.]])
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, NumericError

_ids = itertools.count()
_local = threading.local()

Array = np.ndarray
VJP = Callable[[Array], Sequence["Array | None"]]


class Tensor:
    """A dense 2-D array node.  ``requires_grad`` marks trainable leaves."""

    __slots__ = ("_data", "requires_grad", "id", "name", "op")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        data = np.array(values, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(-1, 1)
        elif data.ndim != 2:
            raise ConfigurationError(f"tensors are 2-D, got shape {data.shape}")
        self._data = data
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.name = name
        self.op: str | None = None

    @property
    def data(self) -> Array:
        return self._data

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    def assign(self, values) -> None:
        """Overwrite the values in place; the shape may not change."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self._data.shape:
            raise ConfigurationError(
                f"cannot assign shape {values.shape} to tensor of shape {self._data.shape}"
            )
        self._data[...] = values

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractViolation(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self._data[0, 0])

    def numpy(self) -> Array:
        return self._data.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


@dataclass
class Tape:
    """Ordered log of recorded operations; use as a context manager."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, Array]:
        """Gradients of the scalar ``loss`` w.r.t. every trainable leaf.

        Leaves in ``params`` that never touched the loss get a zero gradient.
        """
        if loss.shape != (1, 1):
            raise ContractViolation(f"loss must be a 1x1 scalar tensor, got {loss.shape}")
        grads: dict[int, Array] = {loss.id: np.ones((1, 1))}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g_out = grads.pop(rec.output.id, None)
            if g_out is None:
                continue
            for inp, g in zip(rec.inputs, rec.vjp(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + g
                else:
                    grads[inp.id] = g
                if inp.op is None:
                    leaves[inp.id] = inp
        out: dict[Tensor, Array] = {}
        for tid, leaf in leaves.items():
            out[leaf] = grads.get(tid, np.zeros(leaf.shape))
        if loss.requires_grad and loss.op is None:
            out[loss] = np.ones((1, 1))
        for p in params:
            if p not in out:
                out[p] = np.zeros(p.shape)
        return out


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _record(op: str, inputs: tuple[Tensor, ...], values: Array, vjp: VJP,
            differentiable: bool = True) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite output in op '{op}'")
    out = Tensor.__new__(Tensor)
    out._data = values
    out.id = next(_ids)
    out.name = None
    out.op = op
    out.requires_grad = differentiable and any(t.requires_grad for t in inputs)
    stack = _stack()
    if stack and out.requires_grad:
        stack[-1].records.append(_Record(op, inputs, out, vjp))
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# forward ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _record("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _check_same_shape("mul", a, b)
    A, B = a.data, b.data
    return _record("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), c * a.data, lambda g: (c * g,))


def square(a: Tensor) -> Tensor:
    A = a.data
    return _record("square", (a,), A * A, lambda g: (2.0 * A * g,))


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along each row, with the row max subtracted first."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    S = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (S * (g - (g * S).sum(axis=1, keepdims=True)),)

    return _record("row_softmax", (a,), S, vjp)


def row_sum(a: Tensor) -> Tensor:
    """Sum over columns: (r, c) -> (r, 1)."""
    cols = a.shape[1]
    return _record("row_sum", (a,), a.data.sum(axis=1, keepdims=True),
                   lambda g: (np.repeat(g, cols, axis=1),))


def col_sum(a: Tensor) -> Tensor:
    """Sum over rows: (r, c) -> (1, c)."""
    rows = a.shape[0]
    return _record("col_sum", (a,), a.data.sum(axis=0, keepdims=True),
                   lambda g: (np.repeat(g, rows, axis=0),))


def mean(a: Tensor) -> Tensor:
    size = a.data.size
    shape = a.shape
    return _record("mean", (a,), np.full((1, 1), a.data.mean()),
                   lambda g: (np.full(shape, g[0, 0] / size),))


def log(a: Tensor) -> Tensor:
    A = a.data
    if np.any(A <= 0.0):
        raise NumericError("log: input must be strictly positive")
    return _record("log", (a,), np.log(A), lambda g: (g / A,))


def gather_rows(a: Tensor, index) -> Tensor:
    """Rows ``a[index]``; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ConfigurationError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("gather_rows", (a,), a.data[idx], vjp)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Frobenius inner product ``sum(a * b)`` as a 1x1 tensor."""
    _check_same_shape("dot", a, b)
    A, B = a.data, b.data
    value = np.full((1, 1), float(np.sum(A * B)))
    return _record("dot", (a, b), value, lambda g: (g[0, 0] * B, g[0, 0] * A))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity in the forward pass; blocks all gradient flow."""
    return _record("stop_gradient", (a,), a.data.copy(), lambda g: (None,),
                   differentiable=False)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    shape: tuple[int, ...]
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Array = field(default=None, repr=False)
    v: Array = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)

    @classmethod
    def for_param(cls, param: Tensor | Array, lr: float = 1e-2, **kw) -> AdamState:
        shape = param.shape
        return cls(shape=shape, lr=lr, **kw)

    def update(self, values: Array, grad: Array) -> Array:
        """Apply one bias-corrected Adam step to ``values`` in place."""
        if values.shape != self.shape or grad.shape != self.shape:
            raise ConfigurationError(
                f"adam: state shape {self.shape}, param {values.shape}, grad {grad.shape}"
            )
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        self.v += (1.0 - b2) * (grad * grad)
        m_hat = self.m / (1.0 - b1 ** self.step)
        v_hat = self.v / (1.0 - b2 ** self.step)
        values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return values


def adam_step(param: Tensor, grad: Array, state: AdamState) -> tuple[Tensor, AdamState]:
    state.update(param.data, np.asarray(grad, dtype=np.float64))
    return param, state


# ---------------------------------------------------------------------------
# finite differences (test oracle)

def numerical_gradient(f: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: Array, numeric: Array, floor: float = 1e-8) -> float:
    """Max relative error; entries with both |values| below ``floor`` compare absolutely."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    scale_ = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale_ < floor, diff, diff / np.where(scale_ < floor, 1.0, scale_))
    return float(rel.max()) if rel.size else 0.0
