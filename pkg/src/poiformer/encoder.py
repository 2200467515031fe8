"""History encoder: pre-norm transformer encoder blocks over check-in embeddings."""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .nn import FeedForward, LayerNorm, Module, MultiHeadAttention
from .tensor_core import Tensor


class EncoderBlock(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dropout: float = 0.1,
                 ffn_mult: int = 4, attention_scaling: bool = True, dtype=tc.DEFAULT_DTYPE):
        self.ln_attn = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, heads, rng, scaling=attention_scaling, dtype=dtype)
        self.ln_ffn = LayerNorm(d, dtype=dtype)
        self.ffn = FeedForward(d, ffn_mult * d, dropout, rng, dtype=dtype)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = self.ln_attn(x)
        x = tc.add(x, self.attn(h, h))
        return tc.add(x, self.ffn(self.ln_ffn(x), rng))


class TransformerEncoder(Module):
    """A stack of encoder blocks closed by a final layer norm."""

    def __init__(self, d: int, heads: int, layers: int, rng: np.random.Generator,
                 dropout: float = 0.1, ffn_mult: int = 4, attention_scaling: bool = True,
                 dtype=tc.DEFAULT_DTYPE):
        if layers < 1:
            raise ValueError("encoder needs at least one block")
        self.blocks = [EncoderBlock(d, heads, rng, dropout, ffn_mult, attention_scaling, dtype)
                       for _ in range(layers)]
        self.ln_final = LayerNorm(d, dtype=dtype)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, rng)
        return self.ln_final(x)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return tc.reshape(x, (1,) + x.shape), True
    return x, False


def self_attention_block(x: Tensor, block: EncoderBlock, training: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Apply one encoder block to an (n, d) or (B, n, d) input."""
    block.train(training)
    xb, squeeze = _batched(x)
    out = block(xb, rng)
    return tc.reshape(out, out.shape[1:]) if squeeze else out


def encode_history(e_rho: Tensor, encoder: TransformerEncoder, training: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Mobility-pattern representations e^h, one row per check-in."""
    encoder.train(training)
    xb, squeeze = _batched(e_rho)
    out = encoder(xb, rng)
    return tc.reshape(out, out.shape[1:]) if squeeze else out
