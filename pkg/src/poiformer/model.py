"""The assembled next-POI model and its training losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .config import TrainConfig
from .data_pipeline import Trajectory
from .decoder import PreferenceDecoder
from .embedding import MultiModalEmbedding, PoiIndex
from .encoder import TransformerEncoder
from .nn import Linear, Module, param
from .query_generator import PreferenceEncoder, augment, info_nce
from .tensor_core import Tensor


def matching_loss(e_hat: Tensor, positive: Tensor, negatives: Tensor, tau) -> Tensor:
    """Softmax cross-entropy of the positive against N_s negatives for one prediction."""
    for t in (e_hat, positive, negatives):
        if not np.all(np.isfinite(tc.as_tensor(t).data)):
            raise tc.NonFiniteError("matching_loss received non-finite input")
    d = e_hat.shape[-1]
    cands = tc.concat([tc.reshape(positive, (1, d)), tc.as_tensor(negatives).reshape(-1, d)], axis=0)
    logits = tc.div(tc.matmul(cands, tc.reshape(e_hat, (d, 1))), tc.as_tensor(tau))
    return tc.cross_entropy(tc.reshape(logits, (1, -1)), [0])


def batched_matching_loss(e_hat: Tensor, cands: Tensor, tau: Tensor) -> Tensor:
    """e_hat (B, d) against candidates (B, 1 + N_s, d) whose column 0 is the positive."""
    b, k, d = cands.shape
    logits = tc.matmul(cands, tc.reshape(e_hat, (b, d, 1)))
    logits = tc.div(tc.reshape(logits, (b, k)), tau)
    return tc.cross_entropy(logits, np.zeros(b, dtype=np.int64))


def total_loss(l_matching: Tensor, l_contrastive: Tensor | None, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if l_contrastive is None or lam == 0:
        return l_matching
    return tc.add(l_matching, tc.scale(l_contrastive, lam))


def sample_negatives(vocab_size: int, positive, n_s: int, rng: np.random.Generator,
                     weights: np.ndarray | None = None) -> np.ndarray:
    """Distinct negative indices excluding the positive(s).

    ``positive`` may be a scalar (returns shape (n_s,)) or an array of B
    positives (returns (B, n_s)). Uniform unless ``weights`` (popularity) given.
    """
    if n_s >= vocab_size:
        raise ValueError(f"cannot draw {n_s} distinct negatives from a vocabulary of {vocab_size}")
    pos = np.atleast_1d(np.asarray(positive, dtype=np.int64))
    if weights is None:
        keys = rng.random((pos.size, vocab_size - 1))
    else:
        w = np.asarray(weights, dtype=float)
        # Efraimidis-Spirakis keys: weighted sampling without replacement
        u = rng.random((pos.size, vocab_size - 1))
        cols = np.arange(vocab_size - 1)[None, :]
        shifted = cols + (cols >= pos[:, None])
        keys = u ** (1.0 / np.maximum(w[shifted], 1e-12))
        keys = -keys
    order = np.argsort(keys, axis=1, kind="stable")[:, :n_s]
    out = order + (order >= pos[:, None])
    return out[0] if np.ndim(positive) == 0 else out


@dataclass
class Batch:
    poi_idx: np.ndarray
    hours: np.ndarray
    labels: np.ndarray | None = None


class POIFormer(Module):
    def __init__(self, cfg: TrainConfig, pois: PoiIndex, num_categories: int | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        dtype = np.float64 if cfg.dtype == "float64" else np.float32
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        block_args = dict(dropout=cfg.dropout, ffn_mult=cfg.ffn_mult,
                          attention_scaling=cfg.attention_scaling, dtype=dtype)
        self.embedding = MultiModalEmbedding(pois, cfg.d, rng, d_c=cfg.d_c, max_len=cfg.max_len,
                                             num_categories=num_categories, dtype=dtype,
                                             freeze_categories=cfg.freeze_categories,
                                             align_positions_to_end=cfg.align_positions_to_end)
        self.history = TransformerEncoder(cfg.d, cfg.heads, cfg.encoder_layers, rng, **block_args)
        if cfg.ablation == "encoder_only":
            self.pool_proj = Linear(cfg.d, cfg.d, rng, dtype=dtype)
        else:
            shared = self.history if cfg.share_with_history_encoder else None
            self.query_gen = PreferenceEncoder(cfg.d, cfg.heads, cfg.query_layers, rng,
                                               shared_encoder=shared, **block_args)
            self.decoder = PreferenceDecoder(cfg.d, cfg.heads, cfg.decoder_layers, rng, **block_args)
        self.tau = param(np.array([cfg.tau_init]), dtype)
        self.tau.requires_grad = cfg.learnable_tau
        self._popularity: np.ndarray | None = None

    @property
    def pois(self) -> PoiIndex:
        return self.embedding.pois

    @property
    def encoder_only(self) -> bool:
        return self.cfg.ablation == "encoder_only"

    def set_popularity(self, counts: np.ndarray) -> None:
        self._popularity = np.asarray(counts, dtype=float)

    def clamp_tau(self) -> None:
        np.clip(self.tau.data, self.cfg.tau_min, self.cfg.tau_max, out=self.tau.data)

    def batch(self, trajs: Sequence[Trajectory], labels: Sequence[int] | None = None) -> Batch:
        poi_idx, hours = self.pois.encode(trajs)
        lab = None if labels is None else np.array([self.pois.index[p] for p in labels], dtype=np.int64)
        return Batch(poi_idx, hours, lab)

    # ------------------------------------------------------------------
    def predict(self, batch: Batch, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor | None]:
        """Return (e_hat, e_q): unit-norm predicted POI embeddings and preference queries."""
        e_rho, _ = self.embedding(batch.poi_idx, batch.hours)
        e_h = self.history(e_rho, rng)
        if self.encoder_only:
            pooled = tc.mean(e_h, axis=1)
            return tc.l2_normalize(self.pool_proj(pooled), axis=-1), None
        e_q = self.query_gen(e_rho, rng)
        values = e_rho if self.cfg.eq5_literal_values else None
        return self.decoder(e_q, e_h, values, rng), e_q

    def candidate_embeddings(self, poi_idx) -> Tensor:
        return tc.l2_normalize(self.embedding.poi_embedding(poi_idx), axis=-1)

    def augmented_queries(self, trajs: Sequence[Trajectory], rngs: Sequence[np.random.Generator],
                          rng: np.random.Generator | None) -> Tensor:
        """Preference queries of augmented views; views are encoded in equal-length groups."""
        views = [augment(t, self.cfg.augmentation, r) for t, r in zip(trajs, rngs)]
        groups: dict[int, list[int]] = {}
        for i, v in enumerate(views):
            groups.setdefault(len(v), []).append(i)
        outs, order = [], []
        for length in sorted(groups):
            idx = groups[length]
            poi_idx, hours = self.pois.encode([views[i] for i in idx])
            e_rho, _ = self.embedding(poi_idx, hours)
            outs.append(self.query_gen(e_rho, rng))
            order.extend(idx)
        stacked = outs[0] if len(outs) == 1 else tc.concat(outs, axis=0)
        inverse = np.argsort(np.array(order), kind="stable")
        return tc.take(stacked, inverse)

    def loss(self, trajs: Sequence[Trajectory], labels: Sequence[int], rng: np.random.Generator,
             item_rngs: Sequence[np.random.Generator] | None = None) -> tuple[Tensor, dict[str, float]]:
        cfg = self.cfg
        batch = self.batch(trajs, labels)
        e_hat, e_q = self.predict(batch, rng)
        n_s = min(cfg.num_negatives, len(self.pois) - 1)
        negs = sample_negatives(len(self.pois), batch.labels, n_s, rng, self._popularity)
        cand_idx = np.concatenate([batch.labels[:, None], negs.reshape(len(trajs), n_s)], axis=1)
        l_match = batched_matching_loss(e_hat, self.candidate_embeddings(cand_idx), self.tau)
        lam = cfg.effective_lambda
        l_con = None
        if lam > 0 and e_q is not None:
            if item_rngs is None:
                item_rngs = [rng] * len(trajs)
            l_con = info_nce(e_q, self.augmented_queries(trajs, item_rngs, rng), self.tau)
        total = total_loss(l_match, l_con, lam)
        parts = {"matching": l_match.item(), "contrastive": l_con.item() if l_con is not None else 0.0}
        return total, parts

    def score_batch(self, trajs: Sequence[Trajectory]) -> np.ndarray:
        """Cosine scores (B, V) of every vocabulary POI; dropout off, no graph."""
        was_training = self.training
        self.eval()
        try:
            with tc.no_grad():
                e_hat, _ = self.predict(self.batch(trajs))
                cands = self.candidate_embeddings(np.arange(len(self.pois)))
                return e_hat.data @ cands.data.T
        finally:
            self.train(was_training)
