"""Context-aware key encoder: per check-in spatio-temporal and category features summarized by an LSTM.

Parameters are drawn once from a seed and never trained, so a key written
to memory in an early block stays comparable with queries in later ones.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .ingest import CheckIn, DataError, GridSpec, Trajectory, Vocab, assign_region

EMB_DIM = 16
DAY = 86400


@dataclass(frozen=True)
class KeyEncoderConfig:
    d_k: int = 64
    freqs: tuple[float, ...] = (1.0, 2.0, 4.0)
    seed: int = 0

    def __post_init__(self):
        if not self.freqs:
            raise ValueError("frequency set must be nonempty")


@dataclass(frozen=True)
class CoordStats:
    """Min-max scaling bounds, fitted once (on the base block) and then fixed."""

    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float

    @classmethod
    def fit(cls, checkins: Sequence[CheckIn]) -> "CoordStats":
        lats = [c.lat for c in checkins]
        lons = [c.lon for c in checkins]
        return cls(min(lats), max(lats), min(lons), max(lons))

    def normalize(self, lat, lon) -> np.ndarray:
        span_lat = max(self.max_lat - self.min_lat, 1e-12)
        span_lon = max(self.max_lon - self.min_lon, 1e-12)
        out = np.stack([(np.asarray(lat, dtype=float) - self.min_lat) / span_lat,
                        (np.asarray(lon, dtype=float) - self.min_lon) / span_lon], axis=-1)
        # later blocks can stray past the base-block box
        return np.clip(out, 0.0, 1.0)


def time_fields(ts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(hour 0-23, weekday 0=Monday, fraction of day) for UTC epoch seconds."""
    ts = np.asarray(ts, dtype=np.int64)
    hour = (ts // 3600) % 24
    weekday = (ts // DAY + 3) % 7  # 1970-01-01 was a Thursday
    tau = (ts % DAY) / DAY
    return hour, weekday, tau


class KeyEncoder:
    def __init__(self, vocab: Vocab, grid: GridSpec, stats: CoordStats,
                 config: KeyEncoderConfig | None = None):
        self.vocab = vocab
        self.grid = grid
        self.stats = stats
        self.config = cfg = config or KeyEncoderConfig()
        ps = dm.ParameterSet(cfg.seed)
        ps.matrix("coord.W", EMB_DIM, 2)
        ps.bias("coord.b", EMB_DIM)
        ps.table("region", grid.n_cells, EMB_DIM)
        ps.table("hour", 24, EMB_DIM)
        ps.table("weekday", 7, EMB_DIM)
        ps.table("cat_raw", max(len(vocab.raw_categories), 1), EMB_DIM)
        ps.table("cat_der", max(len(vocab.derived_categories), 1), EMB_DIM)
        ps.matrix("proj.W", cfg.d_k, self.feature_dim)
        ps.bias("proj.b", cfg.d_k)
        self.lstm = ps.lstm("rnn", cfg.d_k, cfg.d_k)
        for _, t in ps.items():
            t.requires_grad = False
        self.params = ps
        self._static_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def feature_dim(self) -> int:
        return 2 * EMB_DIM + self.time_dim + 2 * EMB_DIM

    @property
    def time_dim(self) -> int:
        return 2 * EMB_DIM + 2 * len(self.config.freqs)

    # -- per-record embeddings -------------------------------------------

    def embed_geography(self, lat, lon, region_id: int) -> np.ndarray:
        p = self.params
        if not 0 <= region_id < self.grid.n_cells:
            raise DataError(f"unknown region {region_id}")
        l_norm = self.stats.normalize(lat, lon)
        coord = p["coord.W"].value @ l_norm + p["coord.b"].value
        return np.concatenate([coord, p["region"].value[region_id]])

    def embed_time(self, ts) -> np.ndarray:
        """Works on a scalar or an array of timestamps (last axis is the feature)."""
        p = self.params
        hour, weekday, tau = time_fields(ts)
        omega = np.asarray(self.config.freqs)
        angle = 2 * np.pi * np.multiply.outer(tau, omega)
        periodic = np.stack([np.sin(angle), np.cos(angle)], axis=-1)
        periodic = periodic.reshape(angle.shape[:-1] + (2 * len(omega),))
        return np.concatenate([p["hour"].value[hour], p["weekday"].value[weekday], periodic], axis=-1)

    def embed_category(self, raw_id: int, derived_id: int) -> np.ndarray:
        p = self.params
        if not 0 <= raw_id < p["cat_raw"].shape[0]:
            raise DataError(f"unknown raw category {raw_id}")
        if not 0 <= derived_id < p["cat_der"].shape[0]:
            raise DataError(f"unknown derived category {derived_id}")
        return np.concatenate([p["cat_raw"].value[raw_id], p["cat_der"].value[derived_id]])

    def _static_features(self, record: CheckIn) -> tuple[np.ndarray, np.ndarray]:
        # a POI's location and category never change, so cache per POI
        hit = self._static_cache.get(record.poi_id)
        if hit is None:
            region = assign_region(record.lat, record.lon, self.grid)
            geo = self.embed_geography(record.lat, record.lon, region)
            raw_id, der_id = self.vocab.category_ids(record.raw_category)
            hit = self._static_cache[record.poi_id] = (geo, self.embed_category(raw_id, der_id))
        return hit

    def record_features(self, records: Sequence[CheckIn]) -> np.ndarray:
        """(n, 102) per-record Θ ∥ Φ ∥ Ω rows."""
        geo, cat = zip(*(self._static_features(r) for r in records))
        t = self.embed_time([r.timestamp for r in records])
        return np.concatenate([np.stack(geo), t, np.stack(cat)], axis=-1)

    # -- keys ------------------------------------------------------------

    def _run(self, feats: np.ndarray) -> np.ndarray:
        """feats (B, L, F) -> hidden states (B, L, d_k)."""
        p = self.params
        x = feats @ p["proj.W"].value.T + p["proj.b"].value
        W_ih, W_hh, b = (p[f"rnn.{n}"].value for n in ("W_ih", "W_hh", "b"))
        n = self.config.d_k
        B, L, _ = x.shape
        h = np.zeros((B, n))
        c = np.zeros((B, n))
        pre = x @ W_ih.T + b
        out = np.empty((B, L, n))
        for t in range(L):
            z = pre[:, t] + h @ W_hh.T
            i = dm._sigmoid_np(z[:, :n])
            f = dm._sigmoid_np(z[:, n:2 * n])
            g = np.tanh(z[:, 2 * n:3 * n])
            o = dm._sigmoid_np(z[:, 3 * n:])
            c = f * c + i * g
            h = o * np.tanh(c)
            out[:, t] = h
        return out

    def encode_prefixes(self, records: Sequence[CheckIn]) -> np.ndarray:
        """(n, d_k): row i is the key of records[:i+1]."""
        if len(records) == 0:
            raise DataError("cannot encode an empty trajectory")
        return self._run(self.record_features(records)[None])[0]

    def encode_key(self, traj: Trajectory | Sequence[CheckIn]) -> np.ndarray:
        records = traj.records if isinstance(traj, Trajectory) else traj
        return self.encode_prefixes(records)[-1]

    def encode_many(self, trajs: Sequence[Trajectory], prefixes: bool = False) -> list[np.ndarray]:
        """Batched keys (full trajectory, or every prefix) in input order."""
        buckets: dict[int, list[int]] = defaultdict(list)
        for i, t in enumerate(trajs):
            buckets[len(t.records)].append(i)
        out: list[np.ndarray | None] = [None] * len(trajs)
        for _, idx in sorted(buckets.items()):
            feats = np.stack([self.record_features(trajs[i].records) for i in idx])
            states = self._run(feats)
            for j, i in enumerate(idx):
                out[i] = states[j] if prefixes else states[j, -1]
        return out  # type: ignore[return-value]

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()
