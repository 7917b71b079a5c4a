"""Tape-based reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every value is a :class:`Tensor` of shape ``(rows, cols)``.  Tensors created on a
:class:`Tape` (via :meth:`Tape.leaf`) are recorded; any op that touches a recorded
tensor records its result on the same tape, so nodes are appended in topological
order by construction.  Ops applied to tape-less tensors simply evaluate.

    tape = Tape()
    w = tape.leaf(np.ones((2, 1)))
    loss = mse_loss(X @ w, y)
    grads = backward(loss)
    grads[w]

The Adam optimizer lives at the bottom of this module; its inner update is
delegated to :mod:`koodos.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from koodos import kernels

__all__ = [
    "ShapeError", "GradientError", "Tensor", "Tape", "Gradients", "backward",
    "as_tensor", "matmul", "add", "sub", "mul", "scale", "scale_rows", "neg",
    "transpose", "reshape", "relu", "sigmoid", "tanh", "sqrt_eps", "sum", "mean",
    "slice", "take_rows", "concat", "mse_loss", "binary_cross_entropy_loss",
    "binary_cross_entropy_with_logits", "softmax_cross_entropy_loss",
    "squared_l2_distance", "row_l2_distance", "custom_op",
    "AdamState", "adam_step", "Adam",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GradientError(RuntimeError):
    """Raised for invalid backward calls or gradient queries."""


def _as_2d(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"tensors are 1-D or 2-D, got ndim={a.ndim}")
    return a


def _check_finite(a: np.ndarray, op: str) -> None:
    # a single reduction catches NaN and Inf without a boolean temporary;
    # an overflowing sum of finite values falls through to the exact check
    with np.errstate(over="ignore", invalid="ignore"):
        total = a.sum() if a.size else 0.0
    if not np.isfinite(total):
        if not np.isfinite(a).all():
            raise FloatingPointError(f"{op}: non-finite values in result")


class Tensor:
    """Immutable 2-D float64 value, optionally a node on a :class:`Tape`."""

    __slots__ = ("data", "tape", "id", "op", "parents", "_backward",
                 "requires_grad", "trainable", "name")

    def __init__(self, data, *, name: str | None = None, _copy: bool = True):
        a = _as_2d(data)
        if _copy and a is data:
            a = a.copy()
        elif not _copy:
            a = a.view()
        _check_finite(a, name or "tensor")
        a.setflags(write=False)
        self.data = a
        self.tape: Tape | None = None
        self.id = -1
        self.op = "const"
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.requires_grad = False
        self.trainable = False
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f" op={self.op}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of the ops of one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, t: Tensor) -> Tensor:
        t.tape = self
        t.id = len(self.nodes)
        self.nodes.append(t)
        return t

    def leaf(self, data, trainable: bool = True, name: str | None = None) -> Tensor:
        """Record an input.  ``data`` is wrapped without copying when it is
        already a float64 array, so parameters can be handed in directly."""
        t = Tensor(data, name=name, _copy=False)
        t.op = "leaf"
        t.trainable = trainable
        t.requires_grad = trainable
        return self._append(t)

    def const(self, data, name: str | None = None) -> Tensor:
        return self.leaf(data, trainable=False, name=name)

    def release(self) -> None:
        """Drop the recorded graph so its buffers are freed without waiting for
        the cycle collector (nodes and tape refer to each other)."""
        for n in self.nodes:
            n.parents = ()
            n._backward = None
        self.nodes = []

    def graph(self) -> list[tuple[str, tuple[int, ...], tuple[int, int]]]:
        """(op, input ids, shape) per node, in recording order."""
        return [(n.op, tuple(p.id for p in n.parents), n.shape) for n in self.nodes]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor], back) -> Tensor:
    _check_finite(data, op)
    data.setflags(write=False)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.tape = None
    out.id = -1
    out.op = op
    out.parents = tuple(parents)
    out._backward = back
    out.requires_grad = False
    out.trainable = False
    out.name = None
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise GradientError(f"{op}: operands recorded on different tapes")
            tape = p.tape
    if tape is not None:
        out.requires_grad = any(p.requires_grad for p in parents)
        tape._append(out)
    return out


def custom_op(op: str, data: np.ndarray, parents: Sequence[Tensor],
              back: Callable[[np.ndarray, Callable], None]) -> Tensor:
    """Register a fused op.  ``back(g, acc)`` must call ``acc(parent, grad)``
    for every parent that ``requires_grad``."""
    return _node(op, np.asarray(data, dtype=np.float64), parents, back)


# ---------------------------------------------------------------------------
# ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def back(g, acc):
        if a.requires_grad:
            acc(a, g @ b.data.T)
        if b.requires_grad:
            acc(b, a.data.T @ g)
    return _node("matmul", a.data @ b.data, (a, b), back)


def add(a, b) -> Tensor:
    """Elementwise sum.  ``b`` may be a single row broadcast over the rows of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def back(g, acc):
            if a.requires_grad:
                acc(a, g)
            if b.requires_grad:
                acc(b, g)
        return _node("add", a.data + b.data, (a, b), back)
    if b.shape == (1, a.shape[1]):
        def back(g, acc):
            if a.requires_grad:
                acc(a, g)
            if b.requires_grad:
                acc(b, g.sum(axis=0, keepdims=True))
        return _node("add", a.data + b.data, (a, b), back)
    if a.shape == (1, b.shape[1]):
        return add(b, a)
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def back(g, acc):
        if a.requires_grad:
            acc(a, g * b.data)
        if b.requires_grad:
            acc(b, g * a.data)
    return _node("mul", a.data * b.data, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def back(g, acc):
        acc(a, g * c)
    return _node("scale", a.data * c, (a,), back)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def scale_rows(a, s) -> Tensor:
    """Multiply row ``r`` of ``a`` by the constant ``s[r]`` (not differentiated)."""
    a = as_tensor(a)
    s = np.asarray(s, dtype=np.float64).reshape(-1, 1)
    if s.shape[0] != a.shape[0]:
        raise ShapeError(f"scale_rows: {s.shape[0]} scales for shape {a.shape}")

    def back(g, acc):
        acc(a, g * s)
    return _node("scale_rows", a.data * s, (a,), back)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def back(g, acc):
        acc(a, g.T)
    return _node("transpose", a.data.T.copy(), (a,), back)


def reshape(a, shape: tuple[int, int]) -> Tensor:
    a = as_tensor(a)
    r, c = shape
    if r * c != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def back(g, acc):
        acc(a, g.reshape(a.shape))
    return _node("reshape", a.data.reshape(r, c), (a,), back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def back(g, acc):
        acc(a, g * mask)
    return _node("relu", np.where(mask, a.data, 0.0), (a,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)

    def back(g, acc):
        acc(a, g * s * (1.0 - s))
    return _node("sigmoid", s, (a,), back)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def back(g, acc):
        acc(a, g * (1.0 - y * y))
    return _node("tanh", y, (a,), back)


def sqrt_eps(a, eps: float = 0.0) -> Tensor:
    """Elementwise sqrt(a + eps); derivative taken as 0 where the argument is 0."""
    a = as_tensor(a)
    y = np.sqrt(a.data + eps)

    def back(g, acc):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0, 0.5 / y, 0.0)
        acc(a, g * d)
    return _node("sqrt", y, (a,), back)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    if axis is None:
        def back(g, acc):
            acc(a, np.full(a.shape, g[0, 0]))
        return _node("sum", np.array([[a.data.sum()]]), (a,), back)
    if axis not in (0, 1):
        raise ShapeError(f"sum: axis must be None, 0 or 1, got {axis}")

    def back(g, acc):
        acc(a, np.broadcast_to(g, a.shape).copy())
    return _node("sum", a.data.sum(axis=axis, keepdims=True), (a,), back)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def back(g, acc):
        acc(a, np.full(a.shape, g[0, 0] / n))
    return _node("mean", np.array([[a.data.mean()]]), (a,), back)


def slice(a, rows=None, cols=None) -> Tensor:  # noqa: A001
    """Contiguous block ``a[r0:r1, c0:c1]``; ``rows``/``cols`` are (start, stop) or None."""
    a = as_tensor(a)
    r0, r1 = rows if rows is not None else (0, a.shape[0])
    c0, c1 = cols if cols is not None else (0, a.shape[1])
    if not (0 <= r0 < r1 <= a.shape[0] and 0 <= c0 < c1 <= a.shape[1]):
        raise ShapeError(f"slice: block [{r0}:{r1}, {c0}:{c1}] outside shape {a.shape}")
    key = (np.s_[r0:r1], np.s_[c0:c1])

    def back(g, acc):
        acc(a, g, key)
    return _node("slice", a.data[key], (a,), back)


def take_rows(a, idx) -> Tensor:
    """Rows ``a[idx]`` (indices may repeat; gradients of repeats accumulate)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for shape {a.shape}")

    def back(g, acc):
        buf = np.zeros(a.shape)
        np.add.at(buf, idx, g)
        acc(a, buf)
    return _node("take_rows", a.data[idx], (a,), back)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    other = 1 - axis
    for p in parts[1:]:
        if p.shape[other] != parts[0].shape[other]:
            raise ShapeError(f"concat axis={axis}: shapes {parts[0].shape} and {p.shape}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g, acc):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                acc(p, g[lo:hi] if axis == 0 else g[:, lo:hi])
    return _node("concat", np.concatenate([p.data for p in parts], axis=axis), parts, back)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: prediction shape {a.shape} vs target shape {b.shape}")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size

    def back(g, acc):
        if pred.requires_grad:
            acc(pred, g[0, 0] * 2.0 / n * diff)
        if target.requires_grad:
            acc(target, -g[0, 0] * 2.0 / n * diff)
    return _node("mse_loss", np.array([[np.mean(diff * diff)]]), (pred, target), back)


def binary_cross_entropy_loss(prob, target, eps: float = 1e-12) -> Tensor:
    """Mean BCE on probabilities (clamped to [eps, 1-eps]); target is constant."""
    prob, target = as_tensor(prob), as_tensor(target)
    _same_shape("binary_cross_entropy_loss", prob, target)
    p = np.clip(prob.data, eps, 1.0 - eps)
    y = target.data
    n = p.size
    val = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))

    def back(g, acc):
        inside = (prob.data > eps) & (prob.data < 1.0 - eps)
        acc(prob, g[0, 0] / n * (p - y) / (p * (1.0 - p)) * inside)
    return _node("bce", np.array([[val]]), (prob, target), back)


def binary_cross_entropy_with_logits(logits, target) -> Tensor:
    """Mean BCE of sigmoid(logits) against a constant 0/1 target; overflow-safe."""
    logits, target = as_tensor(logits), as_tensor(target)
    _same_shape("binary_cross_entropy_with_logits", logits, target)
    x, y = logits.data, target.data
    n = x.size
    val = np.mean(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x))))

    def back(g, acc):
        acc(logits, g[0, 0] / n * (_sigmoid(x) - y))
    return _node("bce_logits", np.array([[val]]), (logits, target), back)


def softmax_cross_entropy_loss(logits, onehot) -> Tensor:
    """Mean over rows of -sum(onehot * log_softmax(logits))."""
    logits, onehot = as_tensor(logits), as_tensor(onehot)
    _same_shape("softmax_cross_entropy_loss", logits, onehot)
    x = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(x).sum(axis=1, keepdims=True))
    logp = x - logz
    n = x.shape[0]
    val = -np.sum(onehot.data * logp) / n

    def back(g, acc):
        probs = np.exp(logp)
        acc(logits, g[0, 0] / n * (probs * onehot.data.sum(axis=1, keepdims=True) - onehot.data))
    return _node("softmax_ce", np.array([[val]]), (logits, onehot), back)


def squared_l2_distance(a, b) -> Tensor:
    """Scalar sum of squared differences."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("squared_l2_distance", a, b)
    diff = a.data - b.data

    def back(g, acc):
        if a.requires_grad:
            acc(a, 2.0 * g[0, 0] * diff)
        if b.requires_grad:
            acc(b, -2.0 * g[0, 0] * diff)
    return _node("sq_l2", np.array([[np.sum(diff * diff)]]), (a, b), back)


def row_l2_distance(a, b) -> Tensor:
    """Column of Euclidean distances between matching rows.  The gradient of a
    zero distance is taken as 0 (a valid subgradient)."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("row_l2_distance", a, b)
    diff = a.data - b.data
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff)).reshape(-1, 1)

    def back(g, acc):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(d > 0, diff / d, 0.0)
        if a.requires_grad:
            acc(a, g * unit)
        if b.requires_grad:
            acc(b, -g * unit)
    return _node("row_l2", d, (a, b), back)


# ---------------------------------------------------------------------------
# backward

class Gradients:
    """Mapping from trainable leaves to gradient arrays."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise GradientError(f"{t!r} is not recorded on the differentiated tape")
        if not t.trainable:
            raise GradientError(f"{t!r} is not a trainable leaf; no gradient is kept")
        g = self._grads.get(t.id)
        return np.zeros(t.shape) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return t.tape is self._tape and t.trainable

    def leaves(self) -> Iterable[Tensor]:
        return (n for n in self._tape.nodes if n.trainable)


def backward(loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar loss node; returns gradients of every trainable leaf."""
    tape = loss.tape
    if tape is None:
        raise GradientError("loss is not recorded on a tape")
    if loss.shape != (1, 1):
        raise GradientError(f"loss must be a scalar (1, 1) tensor, got {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
    owned: set[int] = {loss.id}

    def acc(node: Tensor, g: np.ndarray, key=None) -> None:
        if not node.requires_grad:
            return
        i = node.id
        cur = grads.get(i)
        if key is not None:
            if cur is None or i not in owned:
                buf = np.zeros(node.shape) if cur is None else np.array(cur)
                grads[i] = buf
                owned.add(i)
            grads[i][key] += g
        elif cur is None:
            grads[i] = g
        elif i in owned:
            cur += g
        else:
            grads[i] = cur + g
            owned.add(i)

    nodes = tape.nodes
    for i in range(loss.id, -1, -1):
        node = nodes[i]
        g = grads.get(i)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, acc)
            if not node.trainable:
                del grads[i]
    return Gradients(tape, grads)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def _check_pairs(params, grads, state: AdamState | None = None) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"adam: {len(params)} parameters but {len(grads)} gradients")
    for k, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"adam: parameter {k} has shape {np.shape(p)}, gradient {np.shape(g)}")
        if state is not None and state.m and np.shape(state.m[k]) != np.shape(p):
            raise ShapeError(f"adam: moment {k} has shape {np.shape(state.m[k])}, parameter {np.shape(p)}")


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """Functional Adam update with bias correction; inputs are left untouched."""
    if state.lr <= 0:
        raise ValueError(f"adam: lr must be positive, got {state.lr}")
    _check_pairs(params, grads, state)
    new = [np.array(p, dtype=np.float64) for p in params]
    m = [np.array(x) for x in state.m] or [np.zeros_like(p) for p in new]
    v = [np.array(x) for x in state.v] or [np.zeros_like(p) for p in new]
    step = state.step + 1
    for p, g, mk, vk in zip(new, grads, m, v):
        kernels.adam_update(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                            mk.reshape(-1), vk.reshape(-1),
                            state.lr, state.beta1, state.beta2, state.eps, step)
    out = AdamState(state.lr, state.beta1, state.beta2, state.eps, step, m, v)
    return new, out


class Adam:
    """In-place Adam over a fixed list of contiguous float64 arrays."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"adam: lr must be positive, got {lr}")
        for p in params:
            if p.dtype != np.float64 or not p.flags.c_contiguous:
                raise TypeError("adam: parameters must be C-contiguous float64 arrays")
        self.params = list(params)
        self.state = AdamState(lr, betas[0], betas[1], eps, 0,
                               [np.zeros_like(p) for p in self.params],
                               [np.zeros_like(p) for p in self.params])

    def step(self, grads: Sequence[np.ndarray]) -> None:
        s = self.state
        _check_pairs(self.params, grads)
        s.step += 1
        for p, g, m, v in zip(self.params, grads, s.m, s.v):
            g = np.ascontiguousarray(g, dtype=np.float64)
            kernels.adam_update(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                                s.lr, s.beta1, s.beta2, s.eps, s.step)
