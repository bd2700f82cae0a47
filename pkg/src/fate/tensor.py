"""Dense tensors with tape-recorded reverse-mode differentiation.

Operations only record onto a :class:`Tape` while one is active and at least
one input depends on a trainable leaf. Everything evaluated outside a tape is
a plain forward pass, which is how pseudo-labels and evaluation stay detached.

    with Tape() as tape:
        loss = (x * y).sum()
    grads = tape.backprop(loss)     # {"x": ..., "y": ...}
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import _accel

DEFAULT_DTYPE = np.float32
PROB_EPS = 1e-12


class FiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a sum carries NaN/Inf from any element; one pass, no temporary mask
    if not math.isfinite(float(arr.sum())) and not np.isfinite(arr).all():
        raise FiniteError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "name", "trainable", "requires_grad", "__weakref__")

    def __init__(self, data, name: str | None = None, trainable: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable

    @classmethod
    def param(cls, data, name: str, trainable: bool = True, dtype=DEFAULT_DTYPE) -> "Tensor":
        arr = np.array(data, dtype=dtype)
        if not np.isfinite(arr).all():
            raise FiniteError(f"parameter {name} has non-finite values")
        return cls(arr, name=name, trainable=trainable)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, trainable={self.trainable})"

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in creation order, so the list is topologically sorted
    by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self._index[id(out)] = len(self.nodes)
        self.nodes.append(_Node(out, tuple(parents), backward))

    def backprop(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. every trainable leaf it reaches.

        Frozen tensors never appear in the result.
        """
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        pos = self._index.get(id(loss))
        if pos is None or self.nodes[pos].out is not loss:
            raise TapeError("loss is detached from this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        result: dict[str, np.ndarray] = {}
        owners: dict[str, Tensor] = {}
        for node in reversed(self.nodes[: pos + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            pgrads = node.backward(g, needs)
            for p, pg, need in zip(node.parents, pgrads, needs):
                if not need or pg is None:
                    continue
                if p.trainable:
                    if p.name is None:
                        raise TapeError("trainable tensor without a name")
                    if p.name in owners and owners[p.name] is not p:
                        raise TapeError(f"two trainable tensors share the name {p.name!r}")
                    owners[p.name] = p
                    if p.name in result:
                        result[p.name] = result[p.name] + pg
                    else:
                        result[p.name] = pg
                else:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        return result


def backprop(loss: Tensor, tape: Tape | None = None) -> dict[str, np.ndarray]:
    if tape is None:
        if not _ACTIVE:
            raise TapeError("no active tape")
        tape = _ACTIVE[-1]
    return tape.backprop(loss)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE[-1].record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = _check_finite(a.data / b.data, "div")

    def bw(g, needs):
        ga = _unbroadcast(g / b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g, needs: (-g,))


def exp(a: Tensor) -> Tensor:
    out = _check_finite(np.exp(a.data), "exp")
    return _make(out, (a,), lambda g, needs: (g * out,))


def log(a: Tensor) -> Tensor:
    out = _check_finite(np.log(a.data), "log")
    return _make(out, (a,), lambda g, needs: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g, needs: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    out = _accel.gelu_fwd(a.data)
    return _make(out, (a,), lambda g, needs: (_accel.gelu_bwd(g, a.data),))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g, needs: (g * c,))


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g, needs: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(a.data.swapaxes(i, j), (a,), lambda g, needs: (g.swapaxes(i, j),))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g, needs: (_unbroadcast(g, a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    fancy = _is_fancy(idx)

    def bw(g, needs):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(out, (a,), bw)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, needs):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _make(out, tensors, bw)


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul with numpy broadcasting over leading dims."""
    out = a.data @ b.data

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if needs[1]:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch dims: (..., n, k)^T @ (..., n, m) summed == flat product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# fused primitives
# ---------------------------------------------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xhat, rstd = _accel.layernorm_fwd(x.data, eps)
    out = xhat * gamma.data + beta.data

    def bw(g, needs):
        gx = _accel.layernorm_bwd(g * gamma.data, xhat, rstd) if needs[0] else None
        gg = _unbroadcast(g * xhat, gamma.shape) if needs[1] else None
        gb = _unbroadcast(g, beta.shape) if needs[2] else None
        return gx, gg, gb

    return _make(_check_finite(out, "layernorm"), (x, gamma, beta), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-shifted)."""
    out = _check_finite(_accel.softmax_fwd(x.data), "softmax")
    return _make(out, (x,), lambda g, needs: (_accel.softmax_bwd(g, out),))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = _check_finite(z - lse, "log_softmax")
    p = np.exp(out)
    return _make(out, (x,), lambda g, needs: (g - p * g.sum(axis=-1, keepdims=True),))


def l2_normalize(x: Tensor, eps: float = 0.0) -> Tensor:
    """Rows scaled to unit norm. A zero row is an error unless ``eps`` > 0."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if eps == 0.0 and (norm == 0).any():
        raise ZeroDivisionError("cannot normalize a zero vector")
    norm = np.maximum(norm, eps) if eps else norm
    out = _check_finite(x.data / norm, "l2_normalize")

    def bw(g, needs):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (x,), bw)


def softmax_rows(t: Tensor | np.ndarray) -> Tensor:
    """Row-wise softmax of a 2-D tensor; rejects non-finite input."""
    t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64))
    if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 1:
        raise ValueError(f"softmax_rows expects a non-empty 2-D tensor, got {t.shape}")
    if not np.isfinite(t.data).all():
        raise FiniteError("softmax_rows received non-finite input")
    return softmax(t)


def cross_entropy(target, predicted, eps: float = PROB_EPS):
    """``-log predicted[argmax target]`` with the probability clamped at ``eps``.

    Works on a single pair of vectors or on row batches (returns per-row
    values). Accepts tensors so it can sit on a tape.
    """
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    idx = np.argmax(tgt, axis=-1)
    if isinstance(predicted, Tensor):
        if predicted.ndim == 1:
            p = getitem(predicted, int(idx))
        else:
            p = getitem(predicted, (np.arange(predicted.shape[0]), idx))
        lo = p.data.dtype.type(eps)
        clamped = np.maximum(p.data, lo)
        active = p.data > lo
        out = -np.log(clamped)
        return _make(out, (p,), lambda g, needs: (-g * active / clamped,))
    pred = np.asarray(predicted, dtype=np.float64)
    if pred.ndim == 1:
        return float(-np.log(max(pred[idx], eps)))
    return -np.log(np.maximum(pred[np.arange(pred.shape[0]), idx], eps))


def nll_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    lp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    return neg(getitem(lp, (rows, np.asarray(labels, dtype=np.int64))))
