"""A small reverse-mode autodiff core on top of numpy, plus Adam.

Operations are recorded only while a :class:`Tape` is active; outside a tape
they are plain numpy computations wrapped in :class:`Tensor`.  The tape keeps
nodes in creation order, which is already a topological order, so
:func:`backward` just walks it in reverse.

Arrays are float32 unless built from float64 data, in which case every
operation stays in float64 (used for gradient verification).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from permsort.errors import ContractViolation, DivergenceError

_active: list["Tape"] = []


class Tensor:
    """An immutable array with an optional backward rule."""

    __slots__ = ("data", "parents", "grad_fn", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Records operations executed inside ``with Tape() as tape:``."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()
        return False


def _wrap(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise DivergenceError(f"non-finite values produced by {op}")


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _active:
        out.parents = tuple(parents)
        out.grad_fn = grad_fn
        _active[-1].nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _node(a.data * c, (a,), lambda g: (g * c,), "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # _node turns inf into DivergenceError
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the value is inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    pick_a = a.data <= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)), "minimum")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    pick_a = a.data >= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)), "maximum")


# reductions and indexing ---------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _node(np.asarray(a.data.sum(axis=axis), dtype=a.dtype), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def getitem(a: Tensor, index) -> Tensor:
    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), grad_fn, "getitem")


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """``out[..., 0] = a[..., idx]``: pick one entry per row of the last axis."""
    idx = np.asarray(idx)[..., None]

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _node(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), grad_fn, "take")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the gradient scatter-adds back, so repeated ids accumulate."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ContractViolation(f"embedding id out of range [0, {rows})")

    def grad_fn(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _node(table.data[ids], (table,), grad_fn, "embedding_lookup")


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``np.matmul`` with gradients; leading batch dimensions may broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractViolation("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), grad_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _node(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def causal_mask(n: int) -> np.ndarray:
    """Boolean ``(n, n)`` pattern, True where position ``i`` may attend to ``j`` (``j <= i``)."""
    return np.tril(np.ones((n, n), dtype=bool))


def masked_softmax_rows(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is True.

    Masked entries get exactly zero weight.  Every row must keep at least one
    visible entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractViolation("masked_softmax_rows: a row has every entry masked")
    s = np.where(mask, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0).astype(scores.dtype)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (scores,), grad_fn, "masked_softmax_rows")


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _node(out, (a,),
                 lambda g: (g - probs * g.sum(axis=-1, keepdims=True),), "log_softmax")


# gradients -----------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse-mode derivatives of scalar ``loss`` for every tensor reached from it.

    Leaves (tensors without a backward rule) always get an entry, zero if the
    loss does not depend on them.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    leaves: dict[Tensor, None] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if parent.grad_fn is None:
                leaves.setdefault(parent)
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    if loss.grad_fn is None:
        leaves.setdefault(loss)
    return {t: grads.get(t, np.zeros_like(t.data)) for t in leaves}


def gradients(loss: Tensor, tape: Tape, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Like :func:`backward` but keyed by parameter name, zero for unused parameters."""
    found = backward(loss, tape)
    return {k: found.get(t, np.zeros_like(t.data)) for k, t in params.items()}


# optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float = 2.5e-4
    clip_norm: float | None = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-6)
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState):
    """One bias-corrected Adam update after global-norm clipping.

    Returns ``(new_params, state, pre_clip_norm)``; input tensors are left untouched.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {k}")
    if state.clip_norm is not None:
        grads, norm = clip_by_global_norm(grads, state.clip_norm)
    else:
        norm = global_norm(grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    new = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new[k] = p
            continue
        m = state.m.get(k, np.zeros_like(p.data))
        v = state.v.get(k, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        # epsilon is applied to the bias-corrected second moment
        eps_hat = state.eps * np.sqrt(1.0 - b2**t)
        data = (p.data - lr_t * m / (np.sqrt(v) + eps_hat)).astype(p.dtype)
        if not np.isfinite(data).all():
            raise DivergenceError(f"parameter {k} became non-finite after step {t}")
        new[k] = Tensor(data, name=p.name)
    return new, state, norm
