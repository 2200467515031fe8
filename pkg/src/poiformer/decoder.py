"""Preference decoder: the intention query attends over mobility patterns."""

from __future__ import annotations

import logging

import numpy as np

from . import tensor_core as tc
from .nn import FeedForward, LayerNorm, Module, MultiHeadAttention
from .tensor_core import Tensor

logger = logging.getLogger(__name__)


class DecoderBlock(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dropout: float = 0.1,
                 ffn_mult: int = 4, attention_scaling: bool = True, dtype=tc.DEFAULT_DTYPE):
        self.ln_self = LayerNorm(d, dtype=dtype)
        self.self_attn = MultiHeadAttention(d, heads, rng, scaling=attention_scaling, dtype=dtype)
        self.ln_cross = LayerNorm(d, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d, heads, rng, scaling=attention_scaling, dtype=dtype)
        self.ln_ffn = LayerNorm(d, dtype=dtype)
        self.ffn = FeedForward(d, ffn_mult * d, dropout, rng, dtype=dtype)

    def __call__(self, x: Tensor, memory: Tensor, values: Tensor | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        h = self.ln_self(x)
        x = tc.add(x, self.self_attn(h, h))
        x = tc.add(x, self.cross_attn(self.ln_cross(x), memory, values))
        return tc.add(x, self.ffn(self.ln_ffn(x), rng))


class PreferenceDecoder(Module):
    def __init__(self, d: int, heads: int, layers: int, rng: np.random.Generator,
                 dropout: float = 0.1, ffn_mult: int = 4, attention_scaling: bool = True,
                 dtype=tc.DEFAULT_DTYPE):
        if layers < 1:
            raise ValueError("decoder needs at least one block")
        self.blocks = [DecoderBlock(d, heads, rng, dropout, ffn_mult, attention_scaling, dtype)
                       for _ in range(layers)]
        self.ln_final = LayerNorm(d, dtype=dtype)

    def __call__(self, e_q: Tensor, memory: Tensor, values: Tensor | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        """e_q (B, d) with memory (B, n, d) -> unit-norm predicted POI embeddings (B, d)."""
        b, d = e_q.shape
        x = tc.reshape(e_q, (b, 1, d))
        for block in self.blocks:
            x = block(x, memory, values, rng)
        x = self.ln_final(x)
        return tc.l2_normalize(tc.reshape(x, (b, d)), axis=-1)


def cross_attention(query: Tensor, memory: Tensor, block: DecoderBlock, training: bool = False,
                    rng: np.random.Generator | None = None, values: Tensor | None = None) -> Tensor:
    """Residual cross-attention sub-layer of ``block`` for a (1, d) query over (n, d) memory."""
    if memory.shape[0] == 0:
        raise ValueError("cross-attention memory is empty")
    block.train(training)
    q = tc.reshape(query, (1,) + query.shape)
    m = tc.reshape(memory, (1,) + memory.shape)
    v = None if values is None else tc.reshape(values, (1,) + values.shape)
    out = tc.add(q, block.cross_attn(block.ln_cross(q), m, v))
    return tc.reshape(out, query.shape)


def decode(e_q: Tensor, memory: Tensor, decoder: PreferenceDecoder, training: bool = False,
           rng: np.random.Generator | None = None, values: Tensor | None = None) -> Tensor:
    """Predicted next-POI embedding for a single d-vector query and (n, d) memory."""
    decoder.train(training)
    q = tc.reshape(e_q, (1, e_q.shape[-1]))
    m = tc.reshape(memory, (1,) + memory.shape)
    v = None if values is None else tc.reshape(values, (1,) + values.shape)
    out = decoder(q, m, v, rng)
    return tc.reshape(out, (e_q.shape[-1],))


def score_candidates(e_hat, candidates) -> np.ndarray:
    """Cosine scores of unit-norm candidates against the prediction.

    Zero-norm candidate rows cannot be normalized; they get score -inf and a
    warning so that they rank last.
    """
    e_hat = np.asarray(e_hat.data if isinstance(e_hat, Tensor) else e_hat, dtype=float)
    cand = np.asarray(candidates.data if isinstance(candidates, Tensor) else candidates, dtype=float)
    scores = cand @ e_hat
    zero = ~np.any(cand != 0.0, axis=-1)
    if zero.any():
        logger.warning("excluding %d zero-norm candidates", int(zero.sum()))
        scores = np.where(zero, -np.inf, scores)
    return scores
