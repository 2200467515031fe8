"""Checkpoint pair: ``model.json`` manifest + ``model.bin`` little-endian float32 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data_pipeline import PoiTable
from .embedding import PoiIndex
from .model import POIFormer

FORMAT_VERSION = 1
_DTYPE = "<f4"


class CheckpointVersionError(ValueError):
    pass


def save_checkpoint(model: POIFormer, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(out / "model.bin", "wb") as fh:
        for name, t in model.named_tensors():
            raw = np.ascontiguousarray(t.data, dtype=_DTYPE).tobytes()
            entries.append({"name": name, "shape": list(t.shape), "offset": offset, "dtype": "float32_le"})
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.echo(),
        "coord_bounds": list(model.pois.bounds),
        "num_categories": int(model.embedding.cat_table.shape[0]),
        "num_pois": len(model.pois),
        "tensors": entries,
    }
    (out / "model.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return out / "model.json"


def read_manifest(ckpt_dir) -> dict:
    manifest = json.loads((Path(ckpt_dir) / "model.json").read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format_version {version!r}; expected {FORMAT_VERSION}")
    return manifest


def load_checkpoint(ckpt_dir, vocab: PoiTable) -> POIFormer:
    manifest = read_manifest(ckpt_dir)
    cfg = TrainConfig.model_validate(manifest["config"])
    pois = PoiIndex(vocab, manifest["coord_bounds"])
    if len(pois) != manifest["num_pois"]:
        raise ValueError(f"vocabulary has {len(pois)} POIs but checkpoint expects {manifest['num_pois']}")
    model = POIFormer(cfg, pois, manifest["num_categories"], rng=np.random.default_rng(0))
    blob = (Path(ckpt_dir) / "model.bin").read_bytes()
    tensors = dict(model.named_tensors())
    for entry in manifest["tensors"]:
        t = tensors.pop(entry["name"], None)
        if t is None:
            raise ValueError(f"checkpoint tensor {entry['name']!r} has no counterpart in the model")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=entry["offset"])
        t.data[...] = arr.reshape(entry["shape"])
    if tensors:
        raise ValueError(f"checkpoint is missing tensors: {sorted(tensors)}")
    return model
