"""Training loop: equal-length buckets, joint matching + contrastive loss, Adam, best-val selection."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data_pipeline import DatasetSplit, Pair
from .embedding import PoiIndex, coord_bounds_of
from .evaluation import evaluate
from .model import POIFormer, matching_loss, sample_negatives, total_loss  # noqa: F401  (re-exported)
from .optim import Adam, OptimizerState, adam_step  # noqa: F401

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass
class TrainResult:
    model: POIFormer
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: dict | None = None
    train_recall1: list[tuple[int, float]] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def make_batches(pairs: Sequence[Pair], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, bucket by prefix length, chunk, then shuffle the chunk order."""
    perm = rng.permutation(len(pairs))
    buckets: dict[int, list[int]] = {}
    for i in perm:
        buckets.setdefault(len(pairs[i].prefix), []).append(int(i))
    chunks = [b[s:s + batch_size] for _, b in sorted(buckets.items()) for s in range(0, len(b), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def build_model(cfg: TrainConfig, split: DatasetSplit) -> POIFormer:
    used = {p.label for p in split.train} | {c.poi_id for p in split.train for c in p.prefix.checkins}
    bounds = coord_bounds_of(split.vocab, used or None)
    model = POIFormer(cfg, PoiIndex(split.vocab, bounds), split.vocab.num_categories,
                      rng=np.random.default_rng(cfg.seed))
    if cfg.pretrained_categories:
        model.embedding.load_pretrained_categories(cfg.pretrained_categories, split.vocab.category_labels)
    if cfg.negative_sampling == "popularity":
        counts = np.ones(len(model.pois))
        for p in split.train:
            counts[model.pois.index[p.label]] += 1
        model.set_popularity(counts)
    return model


def _clip(params, max_norm: float) -> None:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm


def _snapshot(model: POIFormer) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_tensors()}


def _restore(model: POIFormer, snap: dict[str, np.ndarray]) -> None:
    for name, t in model.named_tensors():
        t.data[...] = snap[name]


def train(cfg: TrainConfig, split: DatasetSplit, out_dir=None) -> TrainResult:
    if not split.train:
        raise ValueError("training set is empty")
    model = build_model(cfg, split)
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.weight_decay, cfg.betas, cfg.adam_eps, cfg.decoupled_wd)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
    best_score, best_snap = -1.0, None
    start = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            batches = make_batches(split.train, cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))
            losses = []
            for b, chunk in enumerate(batches):
                step_rng = np.random.default_rng([cfg.seed, epoch, b, 0])
                item_rngs = [np.random.default_rng([cfg.seed, epoch, i, 1]) for i in chunk]
                loss, parts = model.loss([split.train[i].prefix for i in chunk],
                                         [split.train[i].label for i in chunk], step_rng, item_rngs)
                value = loss.item()
                if not math.isfinite(value):
                    diag = {"epoch": epoch, "batch": b, "parts": parts, "tau": float(model.tau.data[0]),
                            "items": chunk}
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}", diag)
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip:
                    _clip(params, cfg.grad_clip)
                opt.step()
                model.clamp_tau()
                losses.append(value)
            record = {"epoch": epoch, "train_loss": math.fsum(losses) / len(losses)}
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                val = evaluate(model, split.val, batch_size=cfg.eval_batch_size) if split.val else None
                for key in ("recall@1", "recall@5", "recall@10", "ndcg@5", "ndcg@10"):
                    record[f"val_{key}"] = None if val is None else val[key]
                score = -1.0 if val is None else val["recall@5"]
                if best_snap is None or score > best_score:
                    best_score, best_snap = score, _snapshot(model)
                    result.best_epoch, result.best_val = epoch, val
            else:
                for key in ("recall@1", "recall@5", "recall@10", "ndcg@5", "ndcg@10"):
                    record[f"val_{key}"] = None
            record["wall_seconds"] = round(time.perf_counter() - start, 3) if cfg.record_wall_time else None
            result.history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            logger.info("epoch %d loss %.4f val R@5 %s", epoch, record["train_loss"], record["val_recall@5"])
            if cfg.train_eval_every and epoch % cfg.train_eval_every == 0:
                r1 = evaluate(model, split.train, batch_size=cfg.eval_batch_size)["recall@1"]
                result.train_recall1.append((epoch, r1))
                if cfg.stop_at_train_recall1 is not None and r1 >= cfg.stop_at_train_recall1:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    if best_snap is not None:
        _restore(model, best_snap)
    model.eval()
    if out is not None:
        save_checkpoint(model, out)
    return result


ABLATION_VARIANTS = {name: {"ablation": name} for name in ("full", "no_contrastive", "encoder_only")}


def sweep(cfg: TrainConfig, split: DatasetSplit, seeds: Sequence[int],
          variants: dict[str, dict] | None = None, out_dir=None) -> dict[str, list[dict]]:
    """Train every variant (a dict of config overrides) once per seed; returns test metrics per variant."""
    variants = variants if variants is not None else ABLATION_VARIANTS
    results: dict[str, list[dict]] = {name: [] for name in variants}
    base = cfg.echo()
    for seed in seeds:
        for name, overrides in variants.items():
            run_cfg = TrainConfig.model_validate({**base, **overrides, "seed": seed})
            run_out = None if out_dir is None else Path(out_dir) / f"{name}_seed{seed}"
            res = train(run_cfg, split, run_out)
            metrics = evaluate(res.model, split.test, batch_size=cfg.eval_batch_size)
            logger.info("%s seed %d test %s", name, seed, metrics)
            results[name].append({"seed": seed, **metrics})
    return results


def median_metric(runs: Sequence[dict], key: str = "recall@5") -> float:
    return float(np.median([r[key] for r in runs]))
