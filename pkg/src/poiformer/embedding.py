"""Multi-modal check-in embedding: hour-of-week, location, category and position."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .data_pipeline import PoiTable, Trajectory
from .nn import Module, init_weight, param
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

HOURS_PER_WEEK = 168
SECONDS_PER_WEEK = 7 * 86400
# 1970-01-01 was a Thursday; shift so that Monday 00:00 UTC starts the week
_EPOCH_WEEKDAY_OFFSET = 3 * 86400


def discretize_time(timestamp) -> np.ndarray | int:
    """Hour of the week in UTC, Monday 00:00 = 0."""
    ts = np.asarray(timestamp, dtype=np.int64)
    idx = ((ts + _EPOCH_WEEKDAY_OFFSET) % SECONDS_PER_WEEK) // 3600
    return int(idx) if idx.ndim == 0 else idx


def normalize_coords(lon, lat, bounds: Sequence[float]) -> np.ndarray:
    """Min-max scale (lon, lat) into [0, 1]^2 with clamping; bounds = (lon_min, lon_max, lat_min, lat_max)."""
    lon_min, lon_max, lat_min, lat_max = bounds
    if not (lon_max > lon_min and lat_max > lat_min):
        raise ValueError(f"degenerate coordinate bounds {tuple(bounds)}")
    x = (np.asarray(lon, dtype=float) - lon_min) / (lon_max - lon_min)
    y = (np.asarray(lat, dtype=float) - lat_min) / (lat_max - lat_min)
    return np.clip(np.stack([x, y], axis=-1), 0.0, 1.0)


def coord_bounds_of(table: PoiTable, poi_ids=None) -> tuple[float, float, float, float]:
    ids = table.sorted_ids() if poi_ids is None else sorted(set(poi_ids))
    lons = np.array([table[p].lon for p in ids])
    lats = np.array([table[p].lat for p in ids])
    lon_min, lon_max, lat_min, lat_max = lons.min(), lons.max(), lats.min(), lats.max()
    # widen a degenerate axis so single-POI datasets stay well defined
    if lon_max <= lon_min:
        lon_min, lon_max = lon_min - 0.5, lon_max + 0.5
    if lat_max <= lat_min:
        lat_min, lat_max = lat_min - 0.5, lat_max + 0.5
    return float(lon_min), float(lon_max), float(lat_min), float(lat_max)


class PoiIndex:
    """Dense 0..V-1 indexing of a POI table, ascending by poi_id."""

    def __init__(self, table: PoiTable, bounds: Sequence[float] | None = None):
        self.table = table
        self.ids = np.array(table.sorted_ids(), dtype=np.int64)
        self.index = {int(p): i for i, p in enumerate(self.ids)}
        self.bounds = tuple(bounds) if bounds is not None else coord_bounds_of(table)
        lon = np.array([table[p].lon for p in self.ids])
        lat = np.array([table[p].lat for p in self.ids])
        self.coords = normalize_coords(lon, lat, self.bounds) if len(self.ids) else np.zeros((0, 2))
        self.categories = np.array([table[p].category_id for p in self.ids], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    def encode(self, trajs: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
        """(poi index, hour-of-week) arrays of shape (B, n); all trajectories must share n."""
        n = len(trajs[0])
        if any(len(t) != n for t in trajs):
            raise ValueError("batch trajectories must have equal length")
        pois = np.array([[self.index[c.poi_id] for c in t.checkins] for t in trajs], dtype=np.int64)
        ts = np.array([[c.timestamp for c in t.checkins] for t in trajs], dtype=np.int64)
        return pois.reshape(len(trajs), n), discretize_time(ts).reshape(len(trajs), n)


class MultiModalEmbedding(Module):
    """The learnable embedding tables.

    ``time_proj`` (168 x d) stands in for one-hot x matrix via row selection;
    ``loc_proj`` (2 x d) maps normalized (lon, lat); ``cat_table``
    (categories x d_c) followed by ``cat_proj`` (d_c x d) gives the category
    term; ``pos_table`` (max_len x d) is the learnable positional embedding.
    """

    def __init__(self, pois: PoiIndex, d: int, rng: np.random.Generator, d_c: int = 50,
                 max_len: int = 100, num_categories: int | None = None, dtype=tc.DEFAULT_DTYPE,
                 freeze_categories: bool = False, align_positions_to_end: bool = True):
        if d <= 0:
            raise ValueError("embedding width must be positive")
        self.pois = pois
        self.d = d
        self.max_len = max_len
        self.align_end = align_positions_to_end
        n_cat = num_categories or max(int(pois.categories.max(initial=0)) + 1, 1)
        self.time_proj = param(rng.normal(0.0, 0.1, (HOURS_PER_WEEK, d)), dtype)
        self.loc_proj = init_weight(rng, 2, d, dtype)
        self.cat_table = param(rng.normal(0.0, 1.0 / np.sqrt(d_c), (n_cat, d_c)), dtype)
        self.cat_proj = init_weight(rng, d_c, d, dtype)
        self.pos_table = param(rng.normal(0.0, 0.1, (max_len, d)), dtype)
        if freeze_categories:
            self.cat_table.requires_grad = False

    @property
    def coord_bounds(self) -> tuple[float, float, float, float]:
        return self.pois.bounds

    def _category_rows(self, poi_idx: np.ndarray) -> np.ndarray:
        cats = self.pois.categories[poi_idx]
        return np.where(cats < self.cat_table.shape[0], cats, 0)

    def poi_embedding(self, poi_idx) -> Tensor:
        """e^p = e^l + e^c for an index array of any shape."""
        poi_idx = np.asarray(poi_idx, dtype=np.int64)
        coords = Tensor(self.pois.coords[poi_idx].astype(self.loc_proj.dtype))
        e_l = tc.matmul(coords.reshape(-1, 2), self.loc_proj)
        e_c = tc.matmul(tc.take(self.cat_table, self._category_rows(poi_idx).reshape(-1)), self.cat_proj)
        return tc.reshape(tc.add(e_l, e_c), poi_idx.shape + (self.d,))

    def all_poi_embeddings(self) -> Tensor:
        return self.poi_embedding(np.arange(len(self.pois)))

    def __call__(self, poi_idx: np.ndarray, hours: np.ndarray, use_position: bool = True
                 ) -> tuple[Tensor, Tensor]:
        """Return (e_rho, e_p), each (B, n, d)."""
        n = poi_idx.shape[-1]
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.max_len}")
        e_p = self.poi_embedding(poi_idx)
        e_rho = tc.add(e_p, tc.take(self.time_proj, hours))
        if use_position:
            e_rho = tc.add(e_rho, tc.take(self.pos_table, self.position_rows(n)))
        return e_rho, e_p

    def position_rows(self, n: int) -> np.ndarray:
        """Rows of pos_table used by a length-n sequence.

        End alignment (the left-padding convention of sequential recommenders)
        gives the most recent check-in the same row at every length.
        """
        start = self.max_len - n if self.align_end else 0
        return np.arange(start, start + n)

    def load_pretrained_categories(self, path, labels: Sequence[str]) -> int:
        """Overwrite cat_table rows from a ``label v1 ... v_dc`` text file; returns rows loaded."""
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
        loaded = 0
        d_c = self.cat_table.shape[1]
        for cid, label in enumerate(labels[: self.cat_table.shape[0]]):
            vec = vectors.get(label)
            if vec is None:
                continue
            if vec.shape != (d_c,):
                raise ValueError(f"pretrained vector for {label!r} has width {vec.size}, expected {d_c}")
            self.cat_table.data[cid] = vec
            loaded += 1
        logger.info("loaded %d/%d pretrained category vectors", loaded, len(labels))
        return loaded


def embed_sequence(traj: Trajectory, tables: MultiModalEmbedding) -> tuple[Tensor, Tensor]:
    """Embed one trajectory: (n x d e_rho, n x d e_p)."""
    poi_idx, hours = tables.pois.encode([traj])
    e_rho, e_p = tables(poi_idx, hours)
    return tc.reshape(e_rho, e_rho.shape[1:]), tc.reshape(e_p, e_p.shape[1:])
