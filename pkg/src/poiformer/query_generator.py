"""Query generator: trajectory augmentation, the siamese preference encoder and InfoNCE."""

from __future__ import annotations

import math

import numpy as np

from . import tensor_core as tc
from .config import AugmentationConfig
from .data_pipeline import Trajectory
from .encoder import TransformerEncoder
from .nn import Linear, Module
from .tensor_core import Tensor


def random_crop(traj: Trajectory, keep_ratio: float, rng: np.random.Generator) -> Trajectory:
    n = len(traj)
    if n < 2:
        return traj
    length = max(1, math.floor(keep_ratio * n))
    start = int(rng.integers(0, n - length + 1))
    return traj.replace(traj.checkins[start:start + length])


def _sample_non_adjacent(n: int, k: int, rng: np.random.Generator) -> list[int]:
    """Uniform k-subset of range(n) with no two adjacent members.

    Uses the bijection with k-subsets of range(n - k + 1): sorted c_j -> c_j + j.
    """
    if k == 0:
        return []
    chosen = np.sort(rng.choice(n - k + 1, size=k, replace=False))
    return [int(c) + j for j, c in enumerate(chosen)]


def random_mask(traj: Trajectory, mask_ratio: float, rng: np.random.Generator) -> Trajectory:
    n = len(traj)
    if n < 2:
        return traj
    k = min(math.floor(mask_ratio * n), (n + 1) // 2)
    # keep at least one check-in
    k = min(k, n - 1)
    drop = set(_sample_non_adjacent(n, k, rng))
    return traj.replace(c for i, c in enumerate(traj.checkins) if i not in drop)


def random_reorder(traj: Trajectory, reorder_ratio: float, rng: np.random.Generator) -> Trajectory:
    n = len(traj)
    if n < 2:
        return traj
    swaps = min(math.floor(reorder_ratio * n / 2), n // 2)
    # disjoint adjacent pairs (i, i+1) correspond to non-adjacent starts in range(n - 1)
    starts = _sample_non_adjacent(n - 1, swaps, rng)
    cs = list(traj.checkins)
    for i in starts:
        cs[i], cs[i + 1] = cs[i + 1], cs[i]
    return traj.replace(cs)


def augment(traj: Trajectory, cfg: AugmentationConfig, rng: np.random.Generator) -> Trajectory:
    """With probability apply_prob apply one uniformly chosen enabled method."""
    if not cfg.enabled_methods or rng.random() >= cfg.apply_prob:
        return traj
    method = cfg.enabled_methods[int(rng.integers(len(cfg.enabled_methods)))]
    if method == "crop":
        return random_crop(traj, cfg.crop_keep_ratio, rng)
    if method == "mask":
        return random_mask(traj, cfg.mask_ratio, rng)
    return random_reorder(traj, cfg.reorder_ratio, rng)


class PreferenceEncoder(Module):
    """Transformer stack, mean pooling and a d->d->d projection head, L2-normalized.

    With ``shared_encoder`` the transformer stack is borrowed from the history
    encoder (and not re-registered as a parameter of this module).
    """

    def __init__(self, d: int, heads: int, layers: int, rng: np.random.Generator,
                 dropout: float = 0.1, ffn_mult: int = 4, attention_scaling: bool = True,
                 shared_encoder: TransformerEncoder | None = None, dtype=tc.DEFAULT_DTYPE):
        if shared_encoder is None:
            self.encoder = TransformerEncoder(d, heads, layers, rng, dropout, ffn_mult,
                                              attention_scaling, dtype)
            self._shared = None
        else:
            self._shared = shared_encoder
        self.head1 = Linear(d, d, rng, dtype=dtype)
        self.head2 = Linear(d, d, rng, dtype=dtype)

    @property
    def stack(self) -> TransformerEncoder:
        return self._shared if self._shared is not None else self.encoder

    def named_tensors(self, prefix: str = ""):
        for name, p in super().named_tensors(prefix):
            if not name.startswith(prefix + "_shared."):
                yield name, p

    def __call__(self, e_rho: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """(B, n, d) -> (B, d) unit-norm preference queries."""
        h = self.stack(e_rho, rng)
        pooled = tc.mean(h, axis=1)
        z = self.head2(tc.relu(self.head1(pooled)))
        return tc.l2_normalize(z, axis=-1)


def encode_preference(e_rho: Tensor, encoder: PreferenceEncoder, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Preference query e^q for one (n, d) sequence or a (B, n, d) batch."""
    encoder.train(training)
    if e_rho.ndim == 2:
        out = encoder(tc.reshape(e_rho, (1,) + e_rho.shape), rng)
        return tc.reshape(out, out.shape[1:])
    return encoder(e_rho, rng)


def info_nce(q: Tensor, q_aug: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE: mean over the batch of alpha_i + beta_i, each half a B-way cross-entropy."""
    if q.ndim != 2 or q.shape != q_aug.shape:
        raise tc.ShapeError(f"info_nce expects two (B, d) matrices, got {list(q.shape)} and {list(q_aug.shape)}")
    if not (np.all(np.isfinite(q.data)) and np.all(np.isfinite(q_aug.data))):
        raise tc.NonFiniteError("info_nce received non-finite embeddings")
    tau = tc.as_tensor(tau)
    sim = tc.div(tc.matmul(q, tc.transpose(q_aug)), tau)
    targets = np.arange(q.shape[0])
    alpha = tc.cross_entropy(sim, targets)
    beta = tc.cross_entropy(tc.transpose(sim), targets)
    return tc.scale(tc.add(alpha, beta), 0.5)
