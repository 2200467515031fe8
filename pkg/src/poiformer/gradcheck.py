"""Finite-difference verification of every registered op and of a tiny end-to-end model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor_core as tc
from .config import TrainConfig
from .data_pipeline import SyntheticSpec, generate_synthetic, leave_last_out_split
from .embedding import PoiIndex
from .model import POIFormer
from .tensor_core import GradReport, Tensor, grad_check

OP_THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3


def _p(rng, *shape, low=None) -> Tensor:
    x = rng.normal(size=shape)
    if low is not None:
        # keep away from kinks / poles
        x = np.sign(x) * (np.abs(x) + low)
    return Tensor(x, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return tc.tsum(tc.mul(out, Tensor(w)))


def op_cases(seed: int = 0) -> dict[str, list[tuple[Callable[[], Tensor], list[Tensor]]]]:
    """name -> list of (scalar function, parameters) probes."""
    rng = np.random.default_rng(seed)
    w34 = rng.normal(size=(3, 4))
    cases: dict[str, list] = {}

    a, b = _p(rng, 3, 4), _p(rng, 1, 4)
    cases["add"] = [(lambda a=a, b=b: _weighted(tc.add(a, b), w34), [a, b])]
    a, b = _p(rng, 3, 4), _p(rng, 3, 1)
    cases["sub"] = [(lambda a=a, b=b: _weighted(tc.sub(a, b), w34), [a, b])]
    a, b = _p(rng, 3, 4), _p(rng, 4)
    cases["mul"] = [(lambda a=a, b=b: _weighted(tc.mul(a, b), w34), [a, b])]
    a, b = _p(rng, 3, 4), _p(rng, 3, 4, low=0.5)
    cases["div"] = [(lambda a=a, b=b: _weighted(tc.div(a, b), w34), [a, b])]
    a = _p(rng, 3, 4)
    cases["neg"] = [(lambda a=a: _weighted(tc.neg(a), w34), [a])]
    cases["scale"] = [(lambda a=a: _weighted(tc.scale(a, -2.5), w34), [a])]
    r = _p(rng, 3, 4, low=0.05)
    cases["relu"] = [(lambda r=r: _weighted(tc.relu(r), w34), [r])]
    cases["dropout"] = [(lambda a=a: _weighted(tc.dropout(a, 0.3, np.random.default_rng(7), True), w34), [a])]
    e = Tensor(rng.normal(scale=0.5, size=(3, 4)), requires_grad=True)
    cases["exp"] = [(lambda e=e: _weighted(tc.exp(e), w34), [e])]
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    cases["log"] = [(lambda pos=pos: _weighted(tc.log(pos), w34), [pos])]

    t = _p(rng, 2, 3, 4)
    w_sum = rng.normal(size=(2, 4))
    cases["sum"] = [(lambda t=t: _weighted(tc.tsum(t, axis=1), w_sum), [t])]
    w_mean = rng.normal(size=(3, 4))
    cases["mean"] = [(lambda t=t: _weighted(tc.mean(t, axis=0), w_mean), [t])]
    w_resh = rng.normal(size=(6, 4))
    cases["reshape"] = [(lambda t=t: _weighted(tc.reshape(t, (6, 4)), w_resh), [t])]
    w_tr = rng.normal(size=(3, 2, 4))
    cases["transpose"] = [(lambda t=t: _weighted(tc.transpose(t, (1, 0, 2)), w_tr), [t])]

    table = _p(rng, 5, 3)
    w_take = rng.normal(size=(4, 3))
    cases["take"] = [(lambda table=table: _weighted(tc.take(table, [0, 2, 2, 4]), w_take), [table])]
    c1, c2 = _p(rng, 3, 2), _p(rng, 3, 2)
    cases["concat"] = [(lambda c1=c1, c2=c2: _weighted(tc.concat([c1, c2], axis=1), w34), [c1, c2])]

    m1, m2 = _p(rng, 3, 5), _p(rng, 5, 4)
    bm1, bw2 = _p(rng, 2, 3, 5), _p(rng, 5, 4)
    bb1, bb2 = _p(rng, 2, 3, 5), _p(rng, 2, 5, 4)
    w_b = rng.normal(size=(2, 3, 4))
    cases["matmul"] = [
        (lambda m1=m1, m2=m2: _weighted(tc.matmul(m1, m2), w34), [m1, m2]),
        (lambda bm1=bm1, bw2=bw2: _weighted(tc.matmul(bm1, bw2), w_b), [bm1, bw2]),
        (lambda bb1=bb1, bb2=bb2: _weighted(tc.matmul(bb1, bb2), w_b), [bb1, bb2]),
    ]

    s = _p(rng, 3, 4)
    cases["softmax"] = [(lambda s=s: _weighted(tc.softmax(s, axis=-1), w34), [s]),
                        (lambda s=s: _weighted(tc.softmax(s, axis=0), w34), [s])]
    cases["log_softmax"] = [(lambda s=s: _weighted(tc.log_softmax(s, axis=-1), w34), [s])]
    cases["cross_entropy"] = [(lambda s=s: tc.cross_entropy(s, [1, 0, 3]), [s])]

    x = _p(rng, 2, 3, 4)
    gamma, beta = _p(rng, 4), _p(rng, 4)
    w_ln = rng.normal(size=(2, 3, 4))
    cases["layer_norm"] = [(lambda x=x, g=gamma, b=beta: _weighted(tc.layer_norm(x, g, b), w_ln), [x, gamma, beta])]
    cases["l2_normalize"] = [(lambda s=s: _weighted(tc.l2_normalize(s, axis=-1), w34), [s])]
    missing = set(tc.REGISTERED_OPS) - set(cases)
    assert not missing, f"ops without a gradient probe: {sorted(missing)}"
    return cases


def check_ops(seed: int = 0, h: float = 1e-5) -> list[GradReport]:
    reports = []
    for name, probes in op_cases(seed).items():
        worst = GradReport(name, 0.0, 0)
        for f, params in probes:
            r = grad_check(f, params, h=h, op_name=name)
            worst = GradReport(name, max(worst.max_rel_error, r.max_rel_error),
                               worst.num_params_checked + r.num_params_checked)
        reports.append(worst)
    return reports


def tiny_model_problem(seed: int = 0, ablation: str = "full", **overrides):
    """A d=8 model with one block per module, a batch of B=2 length-5 prefixes, and a
    deterministic loss closure (dropout off, fixed augmentation/negative streams)."""
    cfg = TrainConfig.desk(d=8, heads=2, d_c=4, encoder_layers=1, query_layers=1, decoder_layers=1,
                           dropout=0.0, num_negatives=5, max_len=8, seed=seed, ablation=ablation,
                           dtype="float64", **overrides)
    trajs, table = generate_synthetic(SyntheticSpec(num_users=2, num_pois=10, num_categories=3,
                                                    seq_len=8, transition_noise=0.3, seed=seed))
    split = leave_last_out_split(trajs, table)
    model = POIFormer(cfg, PoiIndex(table), table.num_categories, rng=np.random.default_rng(seed))
    pairs = [p for p in split.train if len(p.prefix) == 5][:2]
    prefixes = [p.prefix for p in pairs]
    labels = [p.label for p in pairs]

    def f() -> Tensor:
        rng = np.random.default_rng([seed, 1])
        items = [np.random.default_rng([seed, 2, i]) for i in range(len(prefixes))]
        loss, _ = model.loss(prefixes, labels, rng, items)
        return loss

    return model, f


def check_model(seed: int = 0, h: float = 1e-5) -> GradReport:
    model, f = tiny_model_problem(seed)
    return grad_check(f, model.parameters(), h=h, op_name="poiformer_tiny")


def run_all(seed: int = 0) -> tuple[list[tuple[GradReport, float]], bool]:
    rows = [(r, OP_THRESHOLD) for r in check_ops(seed)]
    rows.append((check_model(seed), MODEL_THRESHOLD))
    return rows, all(r.passed(t) for r, t in rows)
