"""Tape-based reverse-mode automatic differentiation over 2-D float64 arrays.

Every value is a ``rows x cols`` matrix (scalars are ``1 x 1``). Operations are
recorded on a :class:`Tape` in execution order, so the tape is already a valid
topological order and :func:`backward` is a single reverse sweep.

    >>> tape = Tape()
    >>> x = tape.variable([[3.0]])
    >>> y = x * x
    >>> float(backward(y)[x][0, 0])
    6.0

Binary ops broadcast only scalar (``1 x 1`` or Python number) against a matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "backward",
    "replay",
    "grad_check",
    "matmul",
    "linear",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "square",
    "tanh",
    "relu",
    "sigmoid",
    "softplus",
    "sqrt",
    "reduce",
    "sum",
    "mean",
    "concat",
    "slice_cols",
    "clip",
    "row_norm",
]


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        raise ShapeError(f"tensors are at most rank 2, got shape {arr.shape}")
    return arr


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    requires_grad: bool


class Tensor:
    """Handle to one node of a tape. Arithmetic operators record new nodes."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

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


class Tape:
    """Ordered record of operations; node ids are list positions."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, inputs, attrs, value, requires_grad) -> Tensor:
        self.nodes.append(_Node(kind, tuple(inputs), attrs, value, requires_grad))
        return Tensor(self, len(self.nodes) - 1)

    def variable(self, value) -> Tensor:
        """Leaf that gradients are accumulated for."""
        return self._push("leaf", (), {}, _as_matrix(value).copy(), True)

    def constant(self, value) -> Tensor:
        """Leaf treated as fixed data (no gradient is propagated into it)."""
        return self._push("leaf", (), {}, _as_matrix(value), False)

    def tensor(self, node_id: int) -> Tensor:
        return Tensor(self, node_id)


# ---------------------------------------------------------------------------
# op registry: kind -> (forward(values, attrs), backward(grad, values, out, attrs))


_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _register(kind, forward, backward_fn):
    _FORWARD[kind] = forward
    _BACKWARD[kind] = backward_fn


def _record(kind, inputs: Sequence[Tensor], attrs=None) -> Tensor:
    attrs = attrs or {}
    tape = inputs[0].tape
    for t in inputs[1:]:
        if t.tape is not tape:
            raise ValueError("operands live on different tapes")
    values = [t.value for t in inputs]
    out = _FORWARD[kind](values, attrs)
    requires_grad = any(tape.nodes[t.id].requires_grad for t in inputs)
    return tape._push(kind, [t.id for t in inputs], attrs, out, requires_grad)


def _lift(a, like: Tensor) -> Tensor:
    if isinstance(a, Tensor):
        return a
    return like.tape.constant(a)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.array([[grad.sum()]])


def _check_binary(kind, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape and a.shape != (1, 1) and b.shape != (1, 1):
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not scalar-broadcastable")


# matmul ---------------------------------------------------------------------


def _matmul_fwd(v, _):
    a, b = v
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return a @ b


def _matmul_bwd(g, v, _out, _):
    a, b = v
    return g @ b.T, a.T @ g


_register("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    return _record("matmul", [a, b])


def _linear_fwd(v, _):
    x, w, b = v
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input has {x.shape[1]} columns, weight is {w.shape}")
    if b.shape != (1, w.shape[0]):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    return x @ w.T + b


def _linear_bwd(g, v, _out, _):
    x, w, _b = v
    return g @ w, g.T @ x, g.sum(axis=0, keepdims=True)


_register("linear", _linear_fwd, _linear_bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight ``out x in`` and bias ``1 x out``.

    The bias is added to every row; this is the only row-broadcast in the module.
    """
    x, weight = _pair(x, weight)
    bias = _lift(bias, x)
    return _record("linear", [x, weight, bias])


# binary elementwise -----------------------------------------------------------


def _add_fwd(v, _):
    _check_binary("add", *v)
    return v[0] + v[1]


def _add_bwd(g, v, _out, _):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _sub_fwd(v, _):
    _check_binary("sub", *v)
    return v[0] - v[1]


def _sub_bwd(g, v, _out, _):
    return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)


def _mul_fwd(v, _):
    _check_binary("mul", *v)
    return v[0] * v[1]


def _mul_bwd(g, v, _out, _):
    a, b = v
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(v, _):
    _check_binary("div", *v)
    if np.any(v[1] == 0.0):
        raise DomainError("div: divisor contains zero")
    return v[0] / v[1]


def _div_bwd(g, v, out, _):
    a, b = v
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


_register("add", _add_fwd, _add_bwd)
_register("sub", _sub_fwd, _sub_bwd)
_register("mul", _mul_fwd, _mul_bwd)
_register("div", _div_fwd, _div_bwd)


def add(a, b) -> Tensor:
    return _record("add", list(_pair(a, b)))


def sub(a, b) -> Tensor:
    return _record("sub", list(_pair(a, b)))


def mul(a, b) -> Tensor:
    return _record("mul", list(_pair(a, b)))


def div(a, b) -> Tensor:
    return _record("div", list(_pair(a, b)))


# unary elementwise ------------------------------------------------------------


def _exp_fwd(v, _):
    with np.errstate(over="ignore"):
        out = np.exp(v[0])
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow")
    return out


def _log_fwd(v, _):
    if np.any(v[0] <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return np.log(v[0])


def _sqrt_fwd(v, _):
    if np.any(v[0] <= 0.0):
        raise DomainError("sqrt: input must be strictly positive")
    return np.sqrt(v[0])


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {
    "neg": (lambda v, _: -v[0], lambda g, v, out, _: (-g,)),
    "exp": (_exp_fwd, lambda g, v, out, _: (g * out,)),
    "log": (_log_fwd, lambda g, v, out, _: (g / v[0],)),
    "square": (lambda v, _: v[0] * v[0], lambda g, v, out, _: (2.0 * g * v[0],)),
    "tanh": (lambda v, _: np.tanh(v[0]), lambda g, v, out, _: (g * (1.0 - out * out),)),
    # subgradient at exactly 0 is 0
    "relu": (lambda v, _: np.maximum(v[0], 0.0), lambda g, v, out, _: (g * (v[0] > 0.0),)),
    "sigmoid": (lambda v, _: _sigmoid(v[0]), lambda g, v, out, _: (g * out * (1.0 - out),)),
    "softplus": (lambda v, _: np.logaddexp(0.0, v[0]), lambda g, v, out, _: (g * _sigmoid(v[0]),)),
    "sqrt": (_sqrt_fwd, lambda g, v, out, _: (g * 0.5 / out,)),
}
for _kind, (_f, _b) in _UNARY.items():
    _register(_kind, _f, _b)

_BINARY_KINDS = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Apply a named elementwise op; ``b`` is required for binary kinds only."""
    if kind in _BINARY_KINDS:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY_KINDS[kind](a, b)
    if kind not in _UNARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if b is not None:
        raise ValueError(f"{kind} is unary")
    return _record(kind, [a])


def neg(a: Tensor) -> Tensor:
    return _record("neg", [a])


def exp(a: Tensor) -> Tensor:
    return _record("exp", [a])


def log(a: Tensor) -> Tensor:
    return _record("log", [a])


def square(a: Tensor) -> Tensor:
    return _record("square", [a])


def tanh(a: Tensor) -> Tensor:
    return _record("tanh", [a])


def relu(a: Tensor) -> Tensor:
    return _record("relu", [a])


def sigmoid(a: Tensor) -> Tensor:
    return _record("sigmoid", [a])


def softplus(a: Tensor) -> Tensor:
    return _record("softplus", [a])


def sqrt(a: Tensor) -> Tensor:
    return _record("sqrt", [a])


# reductions ---------------------------------------------------------------------

_AXES = {"all": None, "rows": 0, "cols": 1}


def _reduce_fwd(v, attrs):
    a = v[0]
    if a.size == 0:
        raise ShapeError("reduce: empty tensor")
    axis = _AXES[attrs["axis"]]
    if axis is None:
        out = np.array([[a.sum()]])
    else:
        out = a.sum(axis=axis, keepdims=True)
    if attrs["kind"] == "mean":
        out = out / (a.size if axis is None else a.shape[axis])
    return out


def _reduce_bwd(g, v, _out, attrs):
    a = v[0]
    axis = _AXES[attrs["axis"]]
    grad = np.broadcast_to(g, a.shape).copy()
    if attrs["kind"] == "mean":
        grad /= a.size if axis is None else a.shape[axis]
    return (grad,)


_register("reduce", _reduce_fwd, _reduce_bwd)


def reduce(kind: str, a: Tensor, axis: str = "all") -> Tensor:
    """Sum or mean.

    ``axis="rows"`` collapses the row dimension (result ``1 x cols``),
    ``axis="cols"`` collapses the column dimension (result ``rows x 1``).
    """
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    if axis not in _AXES:
        raise ValueError(f"unknown axis {axis!r}")
    return _record("reduce", [a], {"kind": kind, "axis": axis})


def sum(a: Tensor, axis: str = "all") -> Tensor:  # noqa: A001 - mirrors numpy naming
    return reduce("sum", a, axis)


def mean(a: Tensor, axis: str = "all") -> Tensor:
    return reduce("mean", a, axis)


# structural ------------------------------------------------------------------------


def _concat_fwd(v, _):
    rows = {p.shape[0] for p in v}
    if len(rows) != 1:
        raise ShapeError(f"concat: row counts differ {[p.shape for p in v]}")
    return np.concatenate(v, axis=1)


def _concat_bwd(g, v, _out, _):
    grads, start = [], 0
    for p in v:
        stop = start + p.shape[1]
        grads.append(g[:, start:stop])
        start = stop
    return tuple(grads)


_register("concat", _concat_fwd, _concat_bwd)


def concat(parts: Sequence[Tensor], axis: str = "cols") -> Tensor:
    if axis != "cols":
        raise ValueError("only column-wise concatenation is supported")
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    return _record("concat", list(parts))


def _slice_fwd(v, attrs):
    a = v[0]
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: [{start}, {stop}) out of range for shape {a.shape}")
    return a[:, start:stop].copy()


def _slice_bwd(g, v, _out, attrs):
    grad = np.zeros_like(v[0])
    grad[:, attrs["start"] : attrs["stop"]] = g
    return (grad,)


_register("slice", _slice_fwd, _slice_bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    return _record("slice", [a], {"start": int(start), "stop": int(stop)})


def _clip_fwd(v, attrs):
    return np.clip(v[0], attrs["lo"], attrs["hi"])


def _clip_bwd(g, v, _out, attrs):
    inside = (v[0] >= attrs["lo"]) & (v[0] <= attrs["hi"])
    return (g * inside,)


_register("clip", _clip_fwd, _clip_bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    return _record("clip", [a], {"lo": float(lo), "hi": float(hi)})


def _row_norm_fwd(v, _):
    return np.sqrt(np.sum(v[0] * v[0], axis=1, keepdims=True))


def _row_norm_bwd(g, v, out, _):
    safe = np.where(out > 0.0, out, 1.0)
    return (np.where(out > 0.0, g / safe, 0.0) * v[0],)


_register("row_norm", _row_norm_fwd, _row_norm_bwd)


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row (``rows x 1``). Gradient at a zero row is 0."""
    return _record("row_norm", [a])


# backward / replay -------------------------------------------------------------------


class GradientMap(Mapping):
    """Node id -> gradient. Unreached nodes read as zeros of their value's shape."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def _key(self, key) -> int:
        return key.id if isinstance(key, Tensor) else int(key)

    def __getitem__(self, key) -> np.ndarray:
        k = self._key(key)
        if k in self._grads:
            return self._grads[k]
        if not 0 <= k < len(self._tape.nodes):
            raise KeyError(key)
        return np.zeros_like(self._tape.nodes[k].value)

    def __iter__(self):
        return iter(range(len(self._tape.nodes)))

    def __len__(self):
        return len(self._tape.nodes)


def backward(loss: Tensor | int, tape: Tape | None = None) -> GradientMap:
    """Reverse sweep from a ``1 x 1`` loss node; returns d(loss)/d(node) for every node."""
    if isinstance(loss, Tensor):
        tape = loss.tape
        loss_id = loss.id
    else:
        if tape is None:
            raise ValueError("a tape is required when the loss is given as a node id")
        loss_id = int(loss)
    nodes = tape.nodes
    if nodes[loss_id].value.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {nodes[loss_id].value.shape}")
    grads: dict[int, np.ndarray] = {loss_id: np.ones((1, 1))}
    for idx in range(loss_id, -1, -1):
        g = grads.get(idx)
        node = nodes[idx]
        if g is None or not node.inputs or not node.requires_grad:
            continue
        values = [nodes[i].value for i in node.inputs]
        parts = _BACKWARD[node.kind](g, values, node.value, node.attrs)
        for i, gi in zip(node.inputs, parts):
            if not nodes[i].requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return GradientMap(tape, grads)


def replay(tape: Tape, feeds: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
    """Recompute every node forward from the leaves (optionally substituting leaf values).

    Returns the list of node values; the tape itself is left untouched.
    """
    feeds = feeds or {}
    values: list[np.ndarray] = []
    for idx, node in enumerate(tape.nodes):
        if node.kind == "leaf":
            values.append(_as_matrix(feeds[idx]) if idx in feeds else node.value)
        else:
            values.append(_FORWARD[node.kind]([values[i] for i in node.inputs], node.attrs))
    return values


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               coords: Iterable[tuple[int, int]] | None = None) -> float:
    """Compare autodiff against central differences for a scalar function of one matrix.

    ``fn`` receives a variable tensor on a fresh tape and must return a ``1 x 1``
    tensor. Returns ``max |analytic - numeric| / max(1, |analytic|)`` over the
    checked coordinates (all of them unless ``coords`` is given).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = _as_matrix(point).copy()

    def evaluate(x):
        tape = Tape()
        out = fn(tape.variable(x))
        val = out.item()
        if not np.isfinite(val):
            raise DomainError(f"grad_check: non-finite function value {val}")
        return val, out

    tape = Tape()
    xt = tape.variable(x0)
    out = fn(xt)
    if not np.isfinite(out.item()):
        raise DomainError("grad_check: non-finite function value at the base point")
    analytic = backward(out)[xt]
    if coords is None:
        coords = np.ndindex(*x0.shape)
    worst = 0.0
    for i, j in coords:
        xp = x0.copy()
        xp[i, j] += step
        xm = x0.copy()
        xm[i, j] -= step
        numeric = (evaluate(xp)[0] - evaluate(xm)[0]) / (2.0 * step)
        a = analytic[i, j]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
