"""Synthetic check-in streams with planted routines and population-level drift.

Each user owns one persistent POI per time-of-day slot, near a home point,
and tends to walk through those slots in order during a day. Every block
also has a population-wide trending set; each user follows it at a personal
rate drawn uniformly within ``trend_spread`` of ``trend_rate``. With
probability ``drift`` a user swaps one routine POI for a new one at each
block boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import CategoryMap, CheckIn

DAY = 86400
EPOCH0 = 1_599_955_200  # 2020-09-13 00:00 UTC
SLOT_HOURS = (8, 12, 18, 21)
BBOX = (40.55, 40.90, -74.05, -73.70)


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 500
    n_pois: int = 300
    n_blocks: int = 6
    events_per_block: int = 16
    block_days: int = 14
    n_trending: int = 12
    trend_rate: float = 0.25
    trend_spread: float = 0.25
    drift: float = 0.3
    noise: float = 0.2
    neighborhood: int = 25
    n_categories: int = 24
    n_derived: int = 6
    seed: int = 0

    def __post_init__(self):
        for name in ("drift", "noise", "trend_rate", "trend_spread"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("n_users", "n_pois", "n_blocks", "events_per_block", "block_days",
                     "n_trending", "neighborhood", "n_categories", "n_derived"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_trending > self.n_pois or self.neighborhood > self.n_pois:
            raise ValueError("trending set and neighborhood cannot exceed the POI count")
        if self.neighborhood < len(SLOT_HOURS):
            raise ValueError("neighborhood must hold one POI per slot")

    def block_events(self, block: int) -> int:
        """Base block carries as many events as all later blocks together."""
        return self.events_per_block * (self.n_blocks - 1 if block == 0 and self.n_blocks > 1 else 1)

    def block_length(self, block: int) -> int:
        return self.block_days * (self.n_blocks - 1 if block == 0 and self.n_blocks > 1 else 1)


@dataclass
class World:
    coords: np.ndarray  # (n_pois, 2)
    categories: list[str]
    routines: list[np.ndarray]  # per block: (n_users, n_slots) POI indices
    trending: list[np.ndarray]  # per block: POI indices
    trend_rates: np.ndarray  # (n_users,)


def category_map(spec: SynthSpec) -> CategoryMap:
    return CategoryMap({f"cat{c:02d}": f"group{c % spec.n_derived}" for c in range(spec.n_categories)})


def build_world(spec: SynthSpec) -> World:
    rng = np.random.default_rng([spec.seed, 1])
    lat0, lat1, lon0, lon1 = BBOX
    coords = np.column_stack([rng.uniform(lat0, lat1, spec.n_pois), rng.uniform(lon0, lon1, spec.n_pois)])
    categories = [f"cat{c:02d}" for c in rng.integers(0, spec.n_categories, spec.n_pois)]
    homes = np.column_stack([rng.uniform(lat0, lat1, spec.n_users), rng.uniform(lon0, lon1, spec.n_users)])
    near = np.argsort(((homes[:, None, :] - coords[None, :, :]) ** 2).sum(-1), axis=1)[:, :spec.neighborhood]
    n_slots = len(SLOT_HOURS)
    routine = np.stack([rng.choice(near[u], n_slots, replace=False) for u in range(spec.n_users)])
    routines = [routine.copy()]
    trending = [rng.choice(spec.n_pois, spec.n_trending, replace=False)]
    for _ in range(1, spec.n_blocks):
        routine = routine.copy()
        for u in np.flatnonzero(rng.random(spec.n_users) < spec.drift):
            slot = rng.integers(n_slots)
            options = np.setdiff1d(near[u], routine[u])
            routine[u, slot] = rng.choice(options)
        routines.append(routine)
        trending.append(rng.choice(spec.n_pois, spec.n_trending, replace=False))
    # separate stream so the rest of the world does not depend on the spread
    rates = np.random.default_rng([spec.seed, 3]).uniform(
        spec.trend_rate - spec.trend_spread, spec.trend_rate + spec.trend_spread, spec.n_users)
    return World(coords, categories, routines, trending, np.clip(rates, 0.0, 1.0))


def generate(spec: SynthSpec) -> list[CheckIn]:
    """Deterministic under ``spec.seed``; output sorted by timestamp."""
    world = build_world(spec)
    rng = np.random.default_rng([spec.seed, 2])
    n_slots = len(SLOT_HOURS)
    out: list[CheckIn] = []
    start = EPOCH0
    for b in range(spec.n_blocks):
        n_events = spec.block_events(b)
        days = spec.block_length(b)
        routine, trend = world.routines[b], world.trending[b]
        for u in range(spec.n_users):
            day = rng.integers(0, days, n_events)
            slot = rng.integers(0, n_slots, n_events)
            jitter = rng.integers(-2700, 2700, n_events)
            kind = rng.random(n_events)
            noise_poi = rng.integers(0, spec.n_pois, n_events)
            trend_poi = rng.choice(trend, n_events)
            for e in range(n_events):
                if kind[e] < spec.noise:
                    poi = noise_poi[e]
                elif kind[e] < spec.noise + (1 - spec.noise) * world.trend_rates[u]:
                    poi = trend_poi[e]
                else:
                    poi = routine[u, slot[e]]
                ts = start + int(day[e]) * DAY + SLOT_HOURS[slot[e]] * 3600 + int(jitter[e])
                lat, lon = world.coords[poi]
                out.append(CheckIn(f"u{u:04d}", f"p{poi:04d}", float(lat), float(lon), ts,
                                   world.categories[poi]))
        start += days * DAY
    out.sort(key=lambda c: (c.timestamp, c.user_id, c.poi_id))
    return out
