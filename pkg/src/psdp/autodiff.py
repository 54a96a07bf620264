"""Dense float64 tensors with a define-by-run gradient tape and Adam.

Only the operations the decoder models need are provided. Every op records
itself on the active :class:`Tape` when one of its inputs requires a gradient;
outside a ``with Tape():`` block nothing is recorded, which is how inference
runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    """Every target position was ignored, so the mean loss is undefined."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations.

    Records are appended as ops execute, so inputs always precede the ops
    that consume them and reverse order is a valid topological order.
    """

    _active: list[Tape] = []

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> Tape:
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.pop()

    def __len__(self) -> int:
        return len(self.records)


def _record(inputs: tuple, out: np.ndarray, backward) -> Tensor:
    tensors = tuple(t for t in inputs if isinstance(t, Tensor))
    tracked = bool(Tape._active) and any(t.requires_grad for t in tensors)
    result = Tensor(out, requires_grad=tracked)
    if tracked:
        Tape._active[-1].records.append(_Record(inputs, result, backward))
    return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(loss)/d(value) for everything on ``tape``.

    Gradients land in ``.grad`` of every recorded value; the returned dict
    maps each leaf parameter (a value not produced by a recorded op) to its
    gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    leaves: dict[int, Tensor] = {}
    for rec in tape.records:
        rec.output.grad = np.zeros_like(rec.output.data)
        for t in rec.inputs:
            if isinstance(t, Tensor) and t.requires_grad and id(t) not in produced:
                t.grad = np.zeros_like(t.data)
                leaves[id(t)] = t
    if id(loss) not in produced and id(loss) not in leaves:
        raise ValueError("loss was not recorded on this tape")
    loss.grad = np.ones_like(loss.data)

    for rec in reversed(tape.records):
        grads = rec.backward(rec.output.grad)
        for t, g in zip(rec.inputs, grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            t.grad += g
    return {t: t.grad for t in leaves.values()}


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, _bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, _bw)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar."""
    return _record((x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _record((x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record((x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(tensors, out, _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be a plain matrix or batched like ``a``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _record((a, b), out, _bw)


# ---------------------------------------------------------------------------
# Neural-network ops
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record((x,), y, _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (population variance), then scale and shift."""
    if x.shape[-1] != gamma.shape[-1]:
        raise ShapeError(f"layer_norm: last dim of {x.shape} does not match gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _record((x, gamma, beta), out, _bw)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    out = x.data * cdf

    def _bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data**2)
        return (g * (cdf + x.data * pdf),)

    return _record((x,), out, _bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)].reshape(-1)[0])
        raise IndexError(f"token id {bad} out of range for vocabulary size {vocab}")
    out = table.data[ids]

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record((table,), out, _bw)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_id: int = -100) -> Tensor:
    """Mean token negative log-likelihood over positions whose target != ignore_id."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    keep = targets != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise DegenerateBatchError("all target positions are ignored")
    vocab = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, vocab)
    flat_keep = keep.reshape(-1)
    flat_targets = np.where(keep, targets, 0).reshape(-1)
    if flat_targets.max() >= vocab or flat_targets.min() < 0:
        raise IndexError(f"target id out of range for vocabulary size {vocab}")
    logp = log_softmax(flat_logits)
    picked = logp[np.arange(flat_targets.size), flat_targets]
    loss = -(picked * flat_keep).sum() / count

    def _bw(g):
        grad = np.exp(logp)
        grad[np.arange(flat_targets.size), flat_targets] -= 1.0
        grad *= (flat_keep / count)[:, None]
        return (grad.reshape(logits.shape) * g,)

    return _record((logits,), np.asarray(loss), _bw)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> AdamState:
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adam_step: params, grads and moments differ in length")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"adam_step: shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm
