import json

import numpy as np
import pytest

from poiformer.config import TrainConfig
from poiformer.model import POIFormer
from poiformer.tensor_core import Tensor
from poiformer.trainer import NumericalError, make_batches, sweep, train


def tiny_cfg(**kw):
    base = dict(d=8, heads=2, d_c=4, encoder_layers=1, query_layers=1, decoder_layers=1, max_len=16,
                num_negatives=5, epochs=2, batch_size=8, record_wall_time=False)
    return TrainConfig.desk(**{**base, **kw})


def test_make_batches_partition_by_length(small_split):
    batches = make_batches(small_split.train, 4, np.random.default_rng(0))
    flat = sorted(i for b in batches for i in b)
    assert flat == list(range(len(small_split.train)))
    for b in batches:
        assert 1 <= len(b) <= 4
        assert len({len(small_split.train[i].prefix) for i in b}) == 1


def test_train_writes_log_and_checkpoint(tmp_path, small_split):
    result = train(tiny_cfg(), small_split, tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    assert all(np.isfinite(r["train_loss"]) and r["wall_seconds"] is None for r in lines)
    assert (tmp_path / "model.json").exists() and (tmp_path / "model.bin").exists()
    assert result.best_epoch in (1, 2) and not result.model.training


def test_train_is_deterministic(tmp_path, small_split):
    train(tiny_cfg(seed=5), small_split, tmp_path / "a")
    train(tiny_cfg(seed=5), small_split, tmp_path / "b")
    for name in ("metrics.jsonl", "model.bin", "model.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_early_stop_on_train_recall(small_split):
    result = train(tiny_cfg(epochs=5, train_eval_every=1, stop_at_train_recall1=1e-9), small_split)
    assert result.epochs_run == 1 and len(result.train_recall1) == 1


def test_non_finite_loss_raises_with_diagnostic(small_split, monkeypatch):
    def nan_loss(self, trajs, labels, rng, item_rngs=None):
        return Tensor(np.array(np.nan), requires_grad=True), {"matching": float("nan"), "contrastive": 0.0}

    monkeypatch.setattr(POIFormer, "loss", nan_loss)
    with pytest.raises(NumericalError) as info:
        train(tiny_cfg(), small_split)
    assert info.value.diagnostic["epoch"] == 1 and "tau" in info.value.diagnostic


def test_empty_training_set_rejected(small_split):
    from dataclasses import replace
    with pytest.raises(ValueError):
        train(tiny_cfg(), replace(small_split, train=[]))


def test_sweep_reports_each_variant_and_seed(small_split):
    res = sweep(tiny_cfg(epochs=1), small_split, [1, 2])
    assert set(res) == {"full", "no_contrastive", "encoder_only"}
    assert all([r["seed"] for r in runs] == [1, 2] for runs in res.values())
