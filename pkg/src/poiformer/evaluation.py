"""Full-vocabulary ranking metrics: Recall@k and NDCG@k with a deterministic tie rule."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data_pipeline import Pair

METRIC_KEYS = ("recall@1", "recall@5", "recall@10", "ndcg@5", "ndcg@10", "num_queries")


@dataclass(frozen=True)
class RankedPrediction:
    query_id: int
    ranked_poi_ids: tuple[int, ...]
    truth_poi_id: int

    def rank(self) -> int | None:
        """1-based rank of the truth, or None when it fell outside the stored list."""
        try:
            return self.ranked_poi_ids.index(self.truth_poi_id) + 1
        except ValueError:
            return None


def _check(preds: Sequence[RankedPrediction], k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not preds:
        raise ValueError("no predictions to score")


def recall_at_k(preds: Sequence[RankedPrediction], k: int) -> float:
    _check(preds, k)
    hits = [1.0 if p.truth_poi_id in p.ranked_poi_ids[:k] else 0.0 for p in preds]
    return math.fsum(hits) / len(hits)


def ndcg_at_k(preds: Sequence[RankedPrediction], k: int) -> float:
    _check(preds, k)
    gains = []
    for p in preds:
        r = p.rank()
        gains.append(1.0 / math.log2(r + 1) if r is not None and r <= k else 0.0)
    return math.fsum(gains) / len(gains)


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Column order by descending score; equal scores keep ascending index (lowest poi_id first)."""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")


def rank_predictions(scores: np.ndarray, truth_idx: Sequence[int], poi_ids: np.ndarray,
                     top_n: int = 100, first_query_id: int = 0) -> list[RankedPrediction]:
    order = rank_order(scores)[:, :top_n]
    return [
        RankedPrediction(first_query_id + q, tuple(int(x) for x in poi_ids[order[q]]), int(poi_ids[truth_idx[q]]))
        for q in range(scores.shape[0])
    ]


def metrics_from_predictions(preds: Sequence[RankedPrediction]) -> dict:
    return {
        "recall@1": recall_at_k(preds, 1),
        "recall@5": recall_at_k(preds, 5),
        "recall@10": recall_at_k(preds, 10),
        "ndcg@5": ndcg_at_k(preds, 5),
        "ndcg@10": ndcg_at_k(preds, 10),
        "num_queries": len(preds),
    }


def evaluate(model, pairs: Sequence[Pair], top_n: int = 100, batch_size: int = 256,
             dump_path=None, score_fn: Callable | None = None) -> dict:
    """Score every vocabulary POI for each (prefix, truth) pair and aggregate the metrics.

    ``model`` needs ``pois`` (a PoiIndex) and ``score_batch(trajs) -> (B, V)``;
    ``score_fn`` overrides the latter. Queries are batched by prefix length
    but reported in input order.
    """
    if not pairs:
        return {k: 0.0 for k in METRIC_KEYS[:-1]} | {"num_queries": 0}
    score = score_fn or model.score_batch
    pois = model.pois
    top_n = max(top_n, 10)
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(pairs):
        by_len.setdefault(len(p.prefix), []).append(i)
    preds: list[RankedPrediction | None] = [None] * len(pairs)
    dumped: list[dict | None] = [None] * len(pairs)
    for length in sorted(by_len):
        idx = by_len[length]
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            scores = np.asarray(score([pairs[i].prefix for i in chunk]), dtype=np.float64)
            order = rank_order(scores)[:, :top_n]
            for row, qi in enumerate(chunk):
                ranked = pois.ids[order[row]]
                preds[qi] = RankedPrediction(qi, tuple(int(x) for x in ranked), int(pairs[qi].label))
                if dump_path is not None:
                    dumped[qi] = {"query_id": qi, "truth": int(pairs[qi].label),
                                  "top": [[int(pid), float(scores[row, c])] for pid, c in zip(ranked, order[row])]}
    if dump_path is not None:
        with open(dump_path, "w", encoding="utf-8") as fh:
            for rec in dumped:
                fh.write(json.dumps(rec) + "\n")
    return metrics_from_predictions(preds)
