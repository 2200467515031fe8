"""Parameter containers and the attention primitive shared by all transformer blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; children are
    ``Module`` attributes or lists of modules. Names follow attribute
    insertion order, so iteration order is stable across runs.
    """

    training: bool = True

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Every parameter tensor, frozen ones included."""
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{full}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data: np.ndarray, dtype=tc.DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=tc.DEFAULT_DTYPE) -> Tensor:
    # Glorot-normal
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return param(rng.normal(0.0, std, size=(fan_in, fan_out)), dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=tc.DEFAULT_DTYPE):
        self.weight = init_weight(rng, d_in, d_out, dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = tc.matmul(x, self.weight)
        return y if self.bias is None else tc.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=tc.DEFAULT_DTYPE):
        self.gamma = param(np.ones(d), dtype)
        self.beta = param(np.zeros(d), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Multi-head attention without masking.

    ``w_q``/``w_k``/``w_v`` are stored as d x d matrices whose column blocks
    of width d/H are the per-head projections.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, scaling: bool = True,
                 dtype=tc.DEFAULT_DTYPE):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by head count {heads}")
        self.heads = heads
        self.scaling = scaling
        self.w_q = init_weight(rng, d, d, dtype)
        self.w_k = init_weight(rng, d, d, dtype)
        self.w_v = init_weight(rng, d, d, dtype)
        self.w_z = init_weight(rng, d, d, dtype)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return tc.transpose(tc.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, keys: Tensor, values: Tensor | None = None) -> Tensor:
        """query (B, m, d) attends over keys (B, n, d); values default to keys."""
        if values is None:
            values = keys
        b, m, d = query.shape
        if keys.shape[-1] != d or values.shape[:2] != keys.shape[:2]:
            raise tc.ShapeError(f"attention shapes disagree: query {list(query.shape)}, "
                                f"keys {list(keys.shape)}, values {list(values.shape)}")
        q = self._split(tc.matmul(query, self.w_q))
        k = self._split(tc.matmul(keys, self.w_k))
        v = self._split(tc.matmul(values, self.w_v))
        logits = tc.matmul(q, tc.transpose(k, (0, 1, 3, 2)))
        if self.scaling:
            logits = tc.scale(logits, 1.0 / math.sqrt(d // self.heads))
        weights = tc.softmax(logits, axis=-1)
        self.last_weights = weights.data
        ctx = tc.matmul(weights, v)
        ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (b, m, d))
        return tc.matmul(ctx, self.w_z)


class FeedForward(Module):
    """Linear -> ReLU -> Dropout -> Linear; the second layer starts at zero bias."""

    def __init__(self, d: int, hidden: int, dropout: float, rng: np.random.Generator,
                 dtype=tc.DEFAULT_DTYPE):
        self.lin1 = Linear(d, hidden, rng, dtype=dtype)
        self.lin2 = Linear(hidden, d, rng, dtype=dtype)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        h = tc.relu(self.lin1(x))
        h = tc.dropout(h, self.dropout, rng, self.training)
        return self.lin2(h)
