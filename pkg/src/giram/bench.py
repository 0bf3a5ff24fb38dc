"""Scaling measurements: update cost vs block size, and snapshot size bounds."""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, make_model_pair, train_base
from .fusion import FusionConfig, consistency_scores, update_stage
from .ingest import DataBlock, GridSpec, prepare
from .keyenc import CoordStats, KeyEncoder
from .keygen import KeyGenConfig, KeyGenerator
from .memory import InterestMemory, save_memory
from .synth import SynthSpec, category_map, generate

N_SNAPSHOT_ARRAYS = 9


@dataclass
class ScalingResult:
    n_trajectories: list[int]
    seconds: list[float]
    slope: float
    intercept: float
    r2: float
    memory: InterestMemory


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least squares y = a + b x; returns (b, a, R^2)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(b), float(a), float(1.0 - (resid ** 2).sum() / ss_tot) if ss_tot > 0 else 1.0


def giram_update(model, block: DataBlock, encoder: KeyEncoder, fusion: FusionConfig, keygen: KeyGenConfig,
                 memory: InterestMemory, epochs: int, seed: int = 0) -> None:
    """One full update step: model pair, consistency, memory pass, key generator fit."""
    pair = make_model_pair(model, block, epochs, seed=seed)
    table = consistency_scores(pair, block)
    update_stage(memory, pair, block, encoder, fusion, table)
    keys = np.stack(encoder.encode_many(block.trajectories))
    KeyGenerator(encoder.config.d_k, replace(keygen, seed=seed)).fit(keys)


def update_scaling(scales=(1, 2, 4), repeats: int = 3, spec: SynthSpec | None = None,
                   backbone: BackboneConfig | None = None, keygen: KeyGenConfig | None = None,
                   finetune_epochs: int = 1) -> ScalingResult:
    """Wall-clock of one update on a block whose trajectories are replicated ``scale`` times.

    Replication keeps the per-trajectory work identical, so any departure
    from linear growth comes from the implementation. Best of ``repeats``.
    """
    spec = spec or SynthSpec(n_users=100, n_pois=120, seed=0)
    backbone = backbone or BackboneConfig(epochs=1)
    keygen = keygen or KeyGenConfig(epochs=1)
    checkins = generate(spec)
    vocab, base, blocks = prepare(checkins, n_blocks=5, min_count=10, cmap=category_map(spec))
    encoder = KeyEncoder(vocab, GridSpec.covering(checkins), CoordStats.fit(base.checkins))
    model = train_base(base, vocab, backbone)
    src = blocks[0]
    fusion = FusionConfig()
    counts, seconds = [], []
    memory = None
    for s in scales:
        block = DataBlock(src.index, src.checkins * s, src.time_span, src.trajectories * s)
        best = np.inf
        for _ in range(repeats):
            memory = InterestMemory(100, fusion.top_k)
            t0 = time.perf_counter()
            giram_update(model, block, encoder, fusion, keygen, memory, finetune_epochs)
            best = min(best, time.perf_counter() - t0)
        counts.append(len(block.trajectories))
        seconds.append(best)
    slope, intercept, r2 = linear_fit(counts, seconds)
    return ScalingResult(counts, seconds, slope, intercept, r2, memory)


# ---------------------------------------------------------------- snapshot size

def payload_bound(n_users: int, capacity: int, d_k: int, top_k: int) -> int:
    """Keys as float64 plus top-K values as (float64 prob, int32 index) pairs, every slot full."""
    return n_users * capacity * (d_k * 8 + top_k * 12)


def container_overhead(n_users: int, n_entries: int, id_chars: int) -> int:
    """Everything in a snapshot beyond keys and values.

    Fixed part: an empty snapshot's size (zip and array headers) plus 64
    bytes per array for header growth as shapes gain digits. Per user: the
    id (4 bytes per UTF-32 character) and an int64 entry count. Per entry:
    a float64 timestamp and an int32 nnz.
    """
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "empty.npz"
        save_memory(InterestMemory(1, 1), path)
        fixed = path.stat().st_size
    return fixed + 64 * N_SNAPSHOT_ARRAYS + n_users * (4 * id_chars + 8) + n_entries * 12


def snapshot_within_bound(memory: InterestMemory, path, d_k: int) -> tuple[int, int]:
    """(actual bytes, allowed bytes) for a snapshot of ``memory`` written to ``path``."""
    save_memory(memory, path)
    users = [u for u, m in memory.users.items() if len(m)]
    id_chars = max((len(u) for u in users), default=0)
    allowed = payload_bound(len(users), memory.capacity, d_k, memory.top_k) \
        + container_overhead(len(users), len(memory), id_chars)
    return Path(path).stat().st_size, allowed
