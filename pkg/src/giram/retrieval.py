"""Reciprocal-rank-fusion retrieval of sustained interests from a user's memory."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import softmax_np
from .memory import UserMemory


@dataclass(frozen=True)
class RrfConfig:
    a: float = 50.0

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("RRF smoothing constant must be positive")


def _cosine_matrix(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(queries, axis=-1, keepdims=True)
    kn = np.linalg.norm(keys, axis=-1)
    return (queries @ keys.T) / (qn * kn)


def rank_matrix(memory: UserMemory, queries: np.ndarray) -> np.ndarray:
    """(Q, n) 1-based ranks; descending similarity, earlier slot wins ties."""
    if len(memory) == 0:
        raise ValueError("cannot rank an empty memory")
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    sims = _cosine_matrix(queries, memory.key_matrix())
    order = np.argsort(-sims, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(order.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, order.shape[1] + 1)
    return ranks


def rank_entries(memory: UserMemory, k: np.ndarray) -> np.ndarray:
    return rank_matrix(memory, k)[0]


def rrf_scores(memory: UserMemory, keys: np.ndarray, cfg: RrfConfig = RrfConfig()) -> np.ndarray:
    """Sum over query keys of 1 / (rank + a), one score per memory entry."""
    keys = np.atleast_2d(np.asarray(keys, dtype=float))
    if len(keys) == 0:
        raise ValueError("need at least one query key")
    return (1.0 / (rank_matrix(memory, keys) + cfg.a)).sum(axis=0)


def sustained_interest(memory: UserMemory | None, keys: np.ndarray, n_pois: int,
                       cfg: RrfConfig = RrfConfig()) -> np.ndarray:
    """Softmax(RRF)-weighted sum of memory values; zeros for an empty memory."""
    out = np.zeros(n_pois)
    if memory is None or len(memory) == 0:
        return out
    weights = softmax_np(rrf_scores(memory, keys, cfg))
    for w, v in zip(weights, memory.values):
        out[v.indices] += w * v.probs
    return out


def nearest_value(memory: UserMemory | None, k: np.ndarray, n_pois: int) -> np.ndarray:
    """Value of the single most similar entry (the no-generation ablation)."""
    if memory is None or len(memory) == 0:
        return np.zeros(n_pois)
    i, _ = memory.find_best_match(k)
    return memory.values[i].dense()
