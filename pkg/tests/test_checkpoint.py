import json

import numpy as np
import pytest

from poiformer.checkpoint import CheckpointVersionError, load_checkpoint, read_manifest, save_checkpoint
from poiformer.config import TrainConfig
from poiformer.embedding import PoiIndex
from poiformer.model import POIFormer


def tiny_model(split, **kw):
    cfg = TrainConfig.desk(d=8, heads=2, d_c=4, encoder_layers=1, query_layers=1, decoder_layers=1,
                           max_len=16, num_negatives=5, **kw)
    return POIFormer(cfg, PoiIndex(split.vocab), split.vocab.num_categories, np.random.default_rng(0))


def test_round_trip_restores_float32_values(tmp_path, small_split):
    model = tiny_model(small_split, tau_init=0.3, learnable_tau=False)
    save_checkpoint(model, tmp_path)
    back = load_checkpoint(tmp_path, small_split.vocab)
    for (name, a), (name_b, b) in zip(model.named_tensors(), back.named_tensors()):
        assert name == name_b
        assert np.array_equal(a.data.astype("<f4"), b.data.astype("<f4"))
    assert back.cfg == model.cfg
    assert back.tau.data[0] == pytest.approx(0.3)


def test_manifest_layout(tmp_path, small_split):
    save_checkpoint(tiny_model(small_split), tmp_path)
    manifest = read_manifest(tmp_path)
    assert manifest["format_version"] == 1
    offsets = [t["offset"] for t in manifest["tensors"]]
    sizes = [4 * int(np.prod(t["shape"])) for t in manifest["tensors"]]
    assert offsets == list(np.cumsum([0] + sizes[:-1]))
    assert (tmp_path / "model.bin").stat().st_size == sum(sizes)


def test_encoder_only_checkpoint_has_no_decoder(tmp_path, small_split):
    save_checkpoint(tiny_model(small_split, ablation="encoder_only"), tmp_path)
    names = [t["name"] for t in read_manifest(tmp_path)["tensors"]]
    assert not any(n.startswith(("decoder.", "query_gen.")) for n in names)


def test_version_mismatch(tmp_path, small_split):
    save_checkpoint(tiny_model(small_split), tmp_path)
    manifest = json.loads((tmp_path / "model.json").read_text())
    manifest["format_version"] = 2
    (tmp_path / "model.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path, small_split.vocab)
