import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_table, make_traj
from poiformer.data_pipeline import Pair
from poiformer.embedding import PoiIndex
from poiformer.evaluation import (METRIC_KEYS, RankedPrediction, evaluate, ndcg_at_k, rank_order,
                                  recall_at_k)


def pred(rank, k_list=10):
    ids = list(range(100, 100 + k_list))
    return RankedPrediction(0, tuple(ids), ids[rank - 1] if rank <= k_list else -1)


@pytest.mark.parametrize("rank,expected", [(1, 1.0), (3, 1 / math.log2(4)), (11, 0.0)])
def test_ndcg_single_query(rank, expected):
    assert ndcg_at_k([pred(rank, 20)], 10) == pytest.approx(expected, abs=1e-15)


def test_recall_counts_hits():
    preds = [pred(1), pred(5), pred(6), pred(11, 20)]
    assert recall_at_k(preds, 1) == 0.25
    assert recall_at_k(preds, 5) == 0.5
    assert recall_at_k(preds, 10) == 0.75


def test_metric_errors():
    with pytest.raises(ValueError):
        recall_at_k([], 5)
    with pytest.raises(ValueError):
        ndcg_at_k([pred(1)], 0)


def test_ties_break_toward_lower_index():
    assert rank_order(np.array([[0.5, 0.9, 0.5, 0.9]])).tolist() == [[1, 3, 0, 2]]


class StubModel:
    def __init__(self, table, score_fn):
        self.pois = PoiIndex(table)
        self.score_batch = score_fn


def stub_pairs(num_pois, count, rng):
    return [Pair(make_traj(i, [int(rng.integers(num_pois))] * int(rng.integers(1, 4))), int(rng.integers(num_pois)))
            for i in range(count)]


def test_oracle_stub_scores_perfectly():
    rng = np.random.default_rng(0)
    table = make_table(range(30))
    pairs = stub_pairs(30, 40, rng)
    truth = {id(p.prefix): p.label for p in pairs}

    def oracle(trajs):
        s = np.zeros((len(trajs), 30))
        for row, t in enumerate(trajs):
            s[row, truth[id(t)]] = 1.0
        return s

    out = evaluate(StubModel(table, oracle), pairs)
    assert tuple(out) == METRIC_KEYS
    assert all(out[k] == 1.0 for k in METRIC_KEYS[:-1]) and out["num_queries"] == 40


def test_random_stub_recall_near_k_over_v():
    rng = np.random.default_rng(1)
    v, q = 50, 4000
    table = make_table(range(v))
    pairs = stub_pairs(v, q, rng)
    out = evaluate(StubModel(table, lambda trajs: rng.random((len(trajs), v))), pairs, batch_size=512)
    for k in (1, 5, 10):
        p = k / v
        assert abs(out[f"recall@{k}"] - p) < 3 * math.sqrt(p * (1 - p) / q)


def test_dump_scores_lines(tmp_path):
    rng = np.random.default_rng(2)
    table = make_table(range(12))
    pairs = stub_pairs(12, 5, rng)
    evaluate(StubModel(table, lambda trajs: rng.random((len(trajs), 12))), pairs, dump_path=tmp_path / "d.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "d.jsonl").read_text().splitlines()]
    assert [r["query_id"] for r in rows] == list(range(5))
    assert all(len(r["top"]) == 12 for r in rows)
    assert all(r["truth"] == p.label for r, p in zip(rows, pairs))
    scores = [s for _, s in rows[0]["top"]]
    assert scores == sorted(scores, reverse=True)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_metrics_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    table = make_table(range(20))
    pairs = stub_pairs(20, 30, rng)
    scores = rng.normal(size=(30, 20)).round(1)  # rounding forces ties
    fixed = {id(p.prefix): scores[i] for i, p in enumerate(pairs)}
    base = lambda trajs: np.stack([fixed[id(t)] for t in trajs])
    a = evaluate(StubModel(table, base), pairs)
    b = evaluate(StubModel(table, lambda trajs: np.exp(3 * base(trajs)) + 7), pairs)
    assert a == b
    assert a["recall@1"] <= a["recall@5"] <= a["recall@10"] <= 1.0
    assert (a["ndcg@5"] == 0) == (a["recall@5"] == 0)
