"""Parameter containers and the pre-norm transformer block."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Anything holding named :class:`Tensor` parameters."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for value in self.__dict__.values():
            if isinstance(value, Tensor) and value.name is not None:
                out[value.name] = value
            elif isinstance(value, Module):
                out.update(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.update(item.parameters())
                    elif isinstance(item, Tensor) and item.name is not None:
                        out[item.name] = item
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.trainable = flag
            p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing tensors: {sorted(missing)[:5]}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self


def _init(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    # truncated at 2 std, the usual transformer init
    x = rng.standard_normal(shape)
    x = np.clip(x, -2.0, 2.0)
    return (x * std).astype(dtype)


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: float | None = None, dtype=T.DEFAULT_DTYPE):
        std = std if std is not None else 1.0 / math.sqrt(d_in)
        self.w = Tensor.param(_init(rng, (d_in, d_out), std, dtype), f"{name}.w", dtype=dtype)
        self.b = Tensor.param(np.zeros(d_out), f"{name}.b", dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, name: str, d: int, dtype=T.DEFAULT_DTYPE):
        self.g = Tensor.param(np.ones(d), f"{name}.g", dtype=dtype)
        self.b = Tensor.param(np.zeros(d), f"{name}.b", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.g, self.b)


def attention(x: Tensor, qkv: Linear, proj: Linear, heads: int,
              key_mask: np.ndarray | None = None, probe: list | None = None) -> Tensor:
    """Multi-head self-attention over (N, L, d).

    ``key_mask`` is a boolean (N, L) array; False keys get no attention.
    """
    n, length, d = x.shape
    dh = d // heads
    h = qkv(x).reshape(n, length, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = h[0], h[1], h[2]
    scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, -1e9).astype(x.dtype)[:, None, None, :]
        scores = scores + Tensor(bias)
    attn = T.softmax(scores)
    if probe is not None:
        probe.append(attn.data)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(n, length, d)
    return proj(out)


class Block(Module):
    """Pre-norm transformer block: attention then a GELU MLP."""

    def __init__(self, name: str, d: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, dtype=T.DEFAULT_DTYPE):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = LayerNorm(f"{name}.ln1", d, dtype)
        self.qkv = Linear(f"{name}.attn.qkv", d, 3 * d, rng, dtype=dtype)
        # residual branches start small so the untrained stack is near-identity
        self.proj = Linear(f"{name}.attn.proj", d, d, rng, std=0.5 / math.sqrt(d), dtype=dtype)
        self.ln2 = LayerNorm(f"{name}.ln2", d, dtype)
        self.fc1 = Linear(f"{name}.mlp.fc1", d, mlp_ratio * d, rng, dtype=dtype)
        self.fc2 = Linear(f"{name}.mlp.fc2", mlp_ratio * d, d, rng, std=0.5 / math.sqrt(mlp_ratio * d), dtype=dtype)

    def __call__(self, x: Tensor, key_mask=None, probe=None) -> Tensor:
        x = x + attention(self.ln1(x), self.qkv, self.proj, self.heads, key_mask, probe)
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))
