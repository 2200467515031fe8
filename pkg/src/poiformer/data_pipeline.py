"""Check-in ingestion, filtering, windowing, leave-last-out splitting and synthetic data."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN_CATEGORY = 0
FORMATS = ("gowalla_tsv", "foursquare_tsv")


class ParseError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}, line {lineno}: {reason}")
        self.lineno = lineno


@dataclass(frozen=True)
class Poi:
    poi_id: int
    lon: float
    lat: float
    category_id: int = UNKNOWN_CATEGORY

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0 or not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"POI {self.poi_id}: coordinates ({self.lon}, {self.lat}) out of range")


@dataclass(frozen=True)
class CheckIn:
    user_id: int
    timestamp: int
    poi_id: int


@dataclass(frozen=True)
class Trajectory:
    user_id: int
    checkins: tuple[CheckIn, ...]

    def __len__(self) -> int:
        return len(self.checkins)

    @property
    def poi_ids(self) -> list[int]:
        return [c.poi_id for c in self.checkins]

    def replace(self, checkins: Iterable[CheckIn]) -> Trajectory:
        return Trajectory(self.user_id, tuple(checkins))


@dataclass
class PoiTable:
    """POI vocabulary: id -> Poi plus the interned category labels (index = category id)."""

    pois: dict[int, Poi] = field(default_factory=dict)
    category_labels: list[str] = field(default_factory=lambda: ["<unk>"])

    def __len__(self) -> int:
        return len(self.pois)

    def __getitem__(self, poi_id: int) -> Poi:
        return self.pois[poi_id]

    def __contains__(self, poi_id: int) -> bool:
        return poi_id in self.pois

    @property
    def num_categories(self) -> int:
        return len(self.category_labels)

    def sorted_ids(self) -> list[int]:
        return sorted(self.pois)

    def restrict(self, keep: Iterable[int]) -> PoiTable:
        return PoiTable({p: self.pois[p] for p in sorted(set(keep))}, list(self.category_labels))

    def intern(self, label: str | None) -> int:
        if not label:
            return UNKNOWN_CATEGORY
        try:
            return self.category_labels.index(label)
        except ValueError:
            self.category_labels.append(label)
            return len(self.category_labels) - 1


class Pair(NamedTuple):
    prefix: Trajectory
    label: int


@dataclass
class DatasetSplit:
    train: list[Pair]
    val: list[Pair]
    test: list[Pair]
    vocab: PoiTable
    user_count: int
    windows: list[Trajectory] = field(default_factory=list)


# ---------------------------------------------------------------------------
# parsing


def parse_timestamp(text: str) -> int:
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    if not text.endswith("Z"):
        raise ValueError(f"unsupported timestamp {text!r}")
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_checkin_file(path, format: str = "gowalla_tsv") -> tuple[list[Trajectory], PoiTable]:
    """Read ``user<TAB>timestamp<TAB>lat<TAB>lon<TAB>poi[<TAB>category]`` records.

    Both formats share this layout; ``foursquare_tsv`` additionally requires
    the category column. Exact duplicate records are dropped.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    table = PoiTable()
    per_user: dict[int, set[tuple[int, int]]] = defaultdict(set)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) not in (5, 6) or (format == "foursquare_tsv" and len(cols) != 6):
                raise ParseError(path, lineno, f"expected 5 or 6 tab-separated columns, got {len(cols)}")
            try:
                user = int(cols[0])
                ts = parse_timestamp(cols[1])
                lat, lon = float(cols[2]), float(cols[3])
                poi_id = int(cols[4])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if ts < 0:
                raise ParseError(path, lineno, "negative timestamp")
            label = cols[5].strip() if len(cols) == 6 else None
            if poi_id not in table:
                try:
                    table.pois[poi_id] = Poi(poi_id, lon, lat, table.intern(label))
                except ValueError as exc:
                    raise ParseError(path, lineno, str(exc)) from None
            per_user[user].add((ts, poi_id))
    trajs = [
        Trajectory(u, tuple(CheckIn(u, ts, p) for ts, p in sorted(per_user[u])))
        for u in sorted(per_user)
    ]
    table.pois = dict(sorted(table.pois.items()))
    return trajs, table


def write_checkin_file(path, trajs: Sequence[Trajectory], table: PoiTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajs:
            for c in traj.checkins:
                poi = table[c.poi_id]
                label = table.category_labels[poi.category_id] if poi.category_id else ""
                row = [str(c.user_id), format_timestamp(c.timestamp), repr(poi.lat), repr(poi.lon),
                       str(c.poi_id)]
                if label:
                    row.append(label)
                fh.write("\t".join(row) + "\n")


# ---------------------------------------------------------------------------
# protocol


def filter_low_frequency(trajs: Sequence[Trajectory], table: PoiTable,
                         min_user_checkins: int = 10, min_poi_visits: int = 10
                         ) -> tuple[list[Trajectory], PoiTable]:
    """Drop rare POIs and short users alternately until nothing changes."""
    if min_user_checkins < 1 or min_poi_visits < 1:
        raise ValueError("thresholds must be >= 1")
    current = list(trajs)
    while True:
        visits = Counter(c.poi_id for t in current for c in t.checkins)
        rare = {p for p, n in visits.items() if n < min_poi_visits}
        pruned = [t.replace(c for c in t.checkins if c.poi_id not in rare) if rare else t
                  for t in current]
        pruned = [t for t in pruned if len(t) >= min_user_checkins]
        stable = len(pruned) == len(current) and all(len(a) == len(b) for a, b in zip(pruned, current))
        current = pruned
        if stable:
            break
    used = {c.poi_id for t in current for c in t.checkins}
    return current, table.restrict(used)


def window_slice(traj: Trajectory, max_len: int = 100) -> list[Trajectory]:
    if max_len < 4:
        raise ValueError("max_len must be at least 4")
    cs = traj.checkins
    return [traj.replace(cs[i:i + max_len]) for i in range(0, len(cs), max_len)]


def expand_training_subsequences(traj: Trajectory) -> list[Pair]:
    """Pairs (first k check-ins, POI of check-in k+1) for k = 1..n-3."""
    n = len(traj)
    if n < 4:
        raise ValueError(f"trajectory of length {n} is too short to expand (need >= 4)")
    return [Pair(traj.replace(traj.checkins[:k]), traj.checkins[k].poi_id) for k in range(1, n - 2)]


def leave_last_out_split(trajs: Sequence[Trajectory], vocab: PoiTable | None = None) -> DatasetSplit:
    train, val, test, kept = [], [], [], []
    dropped = 0
    for traj in trajs:
        n = len(traj)
        if n < 4:
            dropped += 1
            continue
        kept.append(traj)
        train.extend(expand_training_subsequences(traj))
        val.append(Pair(traj.replace(traj.checkins[:n - 2]), traj.checkins[n - 2].poi_id))
        test.append(Pair(traj.replace(traj.checkins[:n - 1]), traj.checkins[n - 1].poi_id))
    if dropped:
        logger.info("excluded %d trajectories shorter than 4 check-ins", dropped)
    return DatasetSplit(train, val, test, vocab if vocab is not None else PoiTable(),
                        len({t.user_id for t in kept}), kept)


def prepare(trajs: Sequence[Trajectory], table: PoiTable, min_user_checkins: int = 10,
            min_poi_visits: int = 10, window: int = 100, filter_first: bool = True) -> DatasetSplit:
    """Filtering, windowing and splitting in the configured order."""
    if filter_first:
        trajs, table = filter_low_frequency(trajs, table, min_user_checkins, min_poi_visits)
        windows = [w for t in trajs for w in window_slice(t, window)]
    else:
        windows = [w for t in trajs for w in window_slice(t, window)]
        windows, table = filter_low_frequency(windows, table, min_user_checkins, min_poi_visits)
    return leave_last_out_split(windows, table)


# ---------------------------------------------------------------------------
# split directories: train/val/test check-in files + vocabulary + segment layout


def save_split(split: DatasetSplit, out_dir) -> dict:
    """Write a split directory.

    ``train.tsv`` holds each window truncated to n-2 check-ins, ``val.tsv`` to
    n-1 and ``test.tsv`` the whole window; ``segments.json`` records the
    per-window lengths so the files can be re-cut.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = {
        "train": [w.replace(w.checkins[:-2]) for w in split.windows],
        "val": [w.replace(w.checkins[:-1]) for w in split.windows],
        "test": list(split.windows),
    }
    for name, seqs in parts.items():
        write_checkin_file(out / f"{name}.tsv", seqs, split.vocab)
    save_vocab(split.vocab, out / "vocab.tsv")
    counts = {"users": split.user_count, "windows": len(split.windows), "train_pairs": len(split.train),
              "val_pairs": len(split.val), "test_pairs": len(split.test), "pois": len(split.vocab)}
    meta = {"counts": counts,
            "segments": {name: [[s.user_id, len(s)] for s in seqs] for name, seqs in parts.items()}}
    (out / "segments.json").write_text(json.dumps(meta, indent=1) + "\n")
    return counts


def save_vocab(table: PoiTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("poi_id\tlat\tlon\tcategory_id\tcategory_label\n")
        for pid in table.sorted_ids():
            p = table[pid]
            fh.write(f"{pid}\t{p.lat!r}\t{p.lon!r}\t{p.category_id}\t{table.category_labels[p.category_id]}\n")


def load_vocab(path) -> PoiTable:
    table = PoiTable()
    labels: dict[int, str] = {0: "<unk>"}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            pid, lat, lon, cid, label = line.rstrip("\n").split("\t")
            table.pois[int(pid)] = Poi(int(pid), float(lon), float(lat), int(cid))
            labels[int(cid)] = label
    table.category_labels = [labels.get(i, f"<cat{i}>") for i in range(max(labels) + 1)]
    return table


def load_split(data_dir) -> DatasetSplit:
    d = Path(data_dir)
    vocab = load_vocab(d / "vocab.tsv")
    meta = json.loads((d / "segments.json").read_text())
    seqs = {}
    for name in ("train", "val", "test"):
        flat, _ = parse_checkin_file(d / f"{name}.tsv")
        by_user = {t.user_id: list(t.checkins) for t in flat}
        cursor: dict[int, int] = defaultdict(int)
        out = []
        for user, length in meta["segments"][name]:
            start = cursor[user]
            out.append(Trajectory(user, tuple(by_user[user][start:start + length])))
            cursor[user] = start + length
        seqs[name] = out
    train = [p for s in seqs["train"] if len(s) >= 2
             for p in (Pair(s.replace(s.checkins[:k]), s.checkins[k].poi_id) for k in range(1, len(s)))]
    val = [Pair(s.replace(s.checkins[:-1]), s.checkins[-1].poi_id) for s in seqs["val"]]
    test = [Pair(s.replace(s.checkins[:-1]), s.checkins[-1].poi_id) for s in seqs["test"]]
    return DatasetSplit(train, val, test, vocab, len({s.user_id for s in seqs["test"]}), seqs["test"])


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Users share one sparse Markov kernel over POIs; each user's private
    category affinity takes over a ``transition_noise`` fraction of steps."""

    num_users: int = 50
    num_pois: int = 30
    num_categories: int = 5
    seq_len: int = 40
    transition_noise: float = 0.2
    seed: int = 0
    preference_profiles: list[list[float]] | None = None
    kernel_branching: int = 1
    categories_per_user: int = 1
    start_time: int = 1_600_000_000

    def validate(self) -> None:
        if self.num_pois < self.num_categories:
            raise ValueError("num_pois must be >= num_categories")
        if min(self.num_users, self.num_pois, self.num_categories, self.seq_len) < 1:
            raise ValueError("counts must be positive")
        if not 0.0 <= self.transition_noise <= 1.0:
            raise ValueError("transition_noise must lie in [0, 1]")
        if not 1 <= self.kernel_branching < self.num_pois:
            raise ValueError("kernel_branching must be in [1, num_pois)")
        if not 1 <= self.categories_per_user <= self.num_categories:
            raise ValueError("categories_per_user must be in [1, num_categories]")
        if self.preference_profiles is not None:
            prof = np.asarray(self.preference_profiles, dtype=float)
            if prof.shape != (self.num_users, self.num_categories):
                raise ValueError("preference_profiles must be num_users x num_categories")
            if (prof < 0).any() or (prof > 1).any() or not np.allclose(prof.sum(axis=1), 1.0):
                raise ValueError("each affinity row must be a probability distribution")


def paired_disjoint_profiles(num_users: int, num_categories: int, per_user: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Users (2k, 2k+1) get disjoint uniform affinities over ``per_user`` categories each."""
    prof = np.zeros((num_users, num_categories))
    for start in range(0, num_users, 2):
        perm = rng.permutation(num_categories)
        first = perm[:per_user]
        rest = perm[per_user:]
        second = rest[:per_user] if len(rest) >= per_user else rest if len(rest) else perm[:per_user]
        prof[start, first] = 1.0 / len(first)
        if start + 1 < num_users:
            prof[start + 1, second] = 1.0 / len(second)
    return prof


def _build_world(spec: SyntheticSpec, rng: np.random.Generator):
    table = PoiTable(category_labels=["<unk>"] + [f"cat{k}" for k in range(spec.num_categories)])
    lons = rng.uniform(103.6, 104.0, spec.num_pois)
    lats = rng.uniform(1.25, 1.45, spec.num_pois)
    cats = np.arange(spec.num_pois) % spec.num_categories
    for i in range(spec.num_pois):
        table.pois[i] = Poi(i, float(lons[i]), float(lats[i]), int(cats[i]) + 1)
    kernel = np.zeros((spec.num_pois, spec.num_pois))
    for i in range(spec.num_pois):
        others = np.delete(np.arange(spec.num_pois), i)
        succ = rng.choice(others, size=spec.kernel_branching, replace=False)
        kernel[i, succ] = rng.dirichlet(np.ones(spec.kernel_branching))
    return table, kernel, cats


def synthetic_kernel(spec: SyntheticSpec) -> np.ndarray:
    """The shared mobility kernel that ``generate_synthetic(spec)`` samples from."""
    spec.validate()
    return _build_world(spec, np.random.default_rng(spec.seed))[1]


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Trajectory], PoiTable]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    table, kernel, cats = _build_world(spec, rng)
    if spec.preference_profiles is not None:
        profiles = np.asarray(spec.preference_profiles, dtype=float)
    else:
        profiles = paired_disjoint_profiles(spec.num_users, spec.num_categories,
                                            spec.categories_per_user, rng)
    members = [np.flatnonzero(cats == k) for k in range(spec.num_categories)]

    def preferred(u: int) -> int:
        k = rng.choice(spec.num_categories, p=profiles[u])
        return int(rng.choice(members[k]))

    trajs = []
    for u in range(spec.num_users):
        t = spec.start_time + int(rng.integers(0, 7 * 86400))
        cur = preferred(u)
        checkins = [CheckIn(u, t, cur)]
        for _ in range(spec.seq_len - 1):
            t += int(rng.integers(3600, 8 * 3600 + 1))
            if rng.random() < spec.transition_noise:
                cur = preferred(u)
            else:
                cur = int(rng.choice(spec.num_pois, p=kernel[cur]))
            checkins.append(CheckIn(u, t, cur))
        trajs.append(Trajectory(u, tuple(checkins)))
    return trajs, table
