"""Check-in loading, sparsity filtering, temporal blocking and trajectory building."""

from __future__ import annotations

import csv
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CSV_HEADER = ["user_id", "poi_id", "lat", "lon", "timestamp", "category"]
WEEK = 7 * 86400


class DataError(ValueError):
    """Malformed or out-of-range input data."""


class ConfigError(ValueError):
    """Invalid configuration for a data operation."""


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    poi_id: str
    lat: float
    lon: float
    timestamp: int
    raw_category: str

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"longitude {self.lon} outside [-180, 180]")
        if self.timestamp <= 0:
            raise DataError(f"timestamp {self.timestamp} must be positive")


@dataclass(frozen=True)
class Trajectory:
    user_id: str
    records: tuple[CheckIn, ...]

    def __post_init__(self):
        if len(self.records) < 2:
            raise DataError("a trajectory needs at least two check-ins")
        ts = [r.timestamp for r in self.records]
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise DataError("trajectory records must be time-sorted")
        if any(r.user_id != self.user_id for r in self.records):
            raise DataError("trajectory mixes users")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def end_time(self) -> int:
        return self.records[-1].timestamp

    @property
    def traj_id(self) -> str:
        return f"{self.user_id}@{self.records[0].timestamp}"


@dataclass
class DataBlock:
    index: int
    checkins: list[CheckIn]
    time_span: tuple[int, int]
    trajectories: list[Trajectory] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.checkins)


@dataclass(frozen=True)
class GridSpec:
    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float
    rows: int = 100
    cols: int = 100

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("grid needs at least one row and one column")
        if not (self.min_lat < self.max_lat and self.min_lon < self.max_lon):
            raise ConfigError("grid bounding box must have min < max on both axes")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @classmethod
    def covering(cls, checkins, rows: int = 100, cols: int = 100) -> "GridSpec":
        lats = [c.lat for c in checkins]
        lons = [c.lon for c in checkins]
        lo_lat, hi_lat, lo_lon, hi_lon = min(lats), max(lats), min(lons), max(lons)
        # degenerate extents (a single POI column) still need a proper box
        if hi_lat <= lo_lat:
            hi_lat = lo_lat + 1e-6
        if hi_lon <= lo_lon:
            hi_lon = lo_lon + 1e-6
        return cls(lo_lat, hi_lat, lo_lon, hi_lon, rows, cols)


@dataclass
class CategoryMap:
    mapping: dict[str, str] = field(default_factory=dict)

    def __call__(self, raw: str) -> str:
        return self.mapping.get(raw, raw)


# ---------------------------------------------------------------- io

def load_checkins(path) -> list[CheckIn]:
    """Parse a check-in CSV; rows come back sorted by timestamp (stable)."""
    out: list[CheckIn] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        if [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"line 1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                lat, lon, ts = float(row[2]), float(row[3]), int(row[4])
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            try:
                out.append(CheckIn(row[0], row[1], lat, lon, ts, row[5]))
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    out.sort(key=lambda c: c.timestamp)
    return out


def write_checkins(path, checkins) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c in checkins:
            w.writerow([c.user_id, c.poi_id, repr(c.lat), repr(c.lon), c.timestamp, c.raw_category])


def load_category_map(path) -> CategoryMap:
    mapping: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return CategoryMap()
        if [h.strip() for h in header] != ["raw", "derived"]:
            raise DataError("line 1: expected header raw,derived")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"line {lineno}: expected 2 fields, got {len(row)}")
            mapping[row[0]] = row[1]
    return CategoryMap(mapping)


def write_category_map(path, cmap: CategoryMap) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["raw", "derived"])
        for raw in sorted(cmap.mapping):
            w.writerow([raw, cmap.mapping[raw]])


def map_category(raw: str, cmap: CategoryMap) -> str:
    return cmap(raw)


# ---------------------------------------------------------------- protocol

def filter_sparse(checkins: list[CheckIn], min_count: int = 10) -> list[CheckIn]:
    """Drop rare POIs, then rare users among what is left (one pass each)."""
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    poi_counts = Counter(c.poi_id for c in checkins)
    kept = [c for c in checkins if poi_counts[c.poi_id] >= min_count]
    user_counts = Counter(c.user_id for c in kept)
    return [c for c in kept if user_counts[c.user_id] >= min_count]


def _block(index: int, events: list[CheckIn]) -> DataBlock:
    return DataBlock(index, events, (events[0].timestamp, events[-1].timestamp))


def partition_blocks(checkins: list[CheckIn], n_blocks: int) -> tuple[DataBlock, list[DataBlock]]:
    """Earliest half by count is the base block; the rest is cut into equal-count blocks."""
    if n_blocks < 1:
        raise ConfigError("n_blocks must be >= 1")
    if len(checkins) < 2 * n_blocks:
        raise ConfigError(f"{len(checkins)} check-ins cannot fill a base block and {n_blocks} blocks")
    n_base = len(checkins) // 2
    base = _block(0, checkins[:n_base])
    rest = checkins[n_base:]
    size = len(rest) // n_blocks
    blocks = []
    for i in range(n_blocks):
        lo = i * size
        hi = len(rest) if i == n_blocks - 1 else lo + size
        blocks.append(_block(i + 1, rest[lo:hi]))
    return base, blocks


def build_trajectories(block: DataBlock, interval: int = WEEK) -> list[Trajectory]:
    """Per-user fixed windows anchored at the block start; singletons dropped.

    Output is ordered by (window, user first-seen order) so downstream
    processing sees trajectories roughly chronologically.
    """
    if interval <= 0:
        raise ConfigError("interval must be positive")
    start = block.time_span[0]
    buckets: dict[tuple[str, int], list[CheckIn]] = defaultdict(list)
    for c in block.checkins:
        buckets[(c.user_id, (c.timestamp - start) // interval)].append(c)
    trajs = []
    for (user, _), recs in buckets.items():
        if len(recs) < 2:
            continue
        recs = sorted(recs, key=lambda c: c.timestamp)
        trajs.append(Trajectory(user, tuple(recs)))
    trajs.sort(key=lambda t: (t.end_time, t.user_id))
    block.trajectories = trajs
    return trajs


def split_val_test(block, seed: int) -> tuple[list[Trajectory], list[Trajectory]]:
    """Seeded shuffle, first half (rounded up) to validation, the rest to test.

    ``block`` is a DataBlock or a plain list of trajectories.
    """
    trajectories = block.trajectories if isinstance(block, DataBlock) else list(block)
    if not trajectories:
        raise ConfigError("cannot split an empty block")
    order = list(range(len(trajectories)))
    random.Random(seed).shuffle(order)
    n_val = (len(order) + 1) // 2
    val = [trajectories[i] for i in order[:n_val]]
    test = [trajectories[i] for i in order[n_val:]]
    return val, test


def assign_region(lat: float, lon: float, grid: GridSpec) -> int:
    if not (grid.min_lat <= lat <= grid.max_lat and grid.min_lon <= lon <= grid.max_lon):
        raise DataError(f"({lat}, {lon}) outside the grid bounding box")
    row = int((lat - grid.min_lat) / (grid.max_lat - grid.min_lat) * grid.rows)
    col = int((lon - grid.min_lon) / (grid.max_lon - grid.min_lon) * grid.cols)
    row = min(row, grid.rows - 1)
    col = min(col, grid.cols - 1)
    return row * grid.cols + col


# ---------------------------------------------------------------- vocabularies

@dataclass
class Vocab:
    """Stable string -> index maps built once from the full filtered dataset."""

    users: dict[str, int]
    pois: dict[str, int]
    raw_categories: dict[str, int]
    derived_categories: dict[str, int]
    poi_category: dict[str, str]
    cmap: CategoryMap

    @classmethod
    def build(cls, checkins, cmap: CategoryMap | None = None) -> "Vocab":
        cmap = cmap or CategoryMap()

        def index(items):
            return {k: i for i, k in enumerate(sorted(set(items)))}

        poi_category: dict[str, str] = {}
        for c in checkins:
            poi_category.setdefault(c.poi_id, c.raw_category)
        raws = index(c.raw_category for c in checkins)
        return cls(
            users=index(c.user_id for c in checkins),
            pois=index(c.poi_id for c in checkins),
            raw_categories=raws,
            derived_categories=index(cmap(r) for r in raws),
            poi_category=poi_category,
            cmap=cmap,
        )

    @property
    def n_pois(self) -> int:
        return len(self.pois)

    def poi_ids(self, traj: Trajectory) -> np.ndarray:
        try:
            return np.array([self.pois[r.poi_id] for r in traj.records], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown POI {exc.args[0]!r}") from None

    def category_ids(self, raw: str) -> tuple[int, int]:
        return self.raw_categories[raw], self.derived_categories[self.cmap(raw)]


def prepare(path_or_checkins, n_blocks: int = 5, min_count: int = 10,
            interval: int = WEEK, cmap: CategoryMap | None = None):
    """Load, filter, block and trajectorize; returns (vocab, base, blocks)."""
    if isinstance(path_or_checkins, (str, Path)):
        checkins = load_checkins(path_or_checkins)
    else:
        checkins = sorted(path_or_checkins, key=lambda c: c.timestamp)
    checkins = filter_sparse(checkins, min_count)
    if not checkins:
        raise DataError("no check-ins survive filtering")
    vocab = Vocab.build(checkins, cmap)
    base, blocks = partition_blocks(checkins, n_blocks)
    for b in [base, *blocks]:
        build_trajectories(b, interval)
    return vocab, base, blocks
