"""Acc@k and MRR over next-POI predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

CUTOFFS = (5, 10, 20)


@dataclass(frozen=True)
class PredictionRecord:
    rank: int
    traj_id: str = ""
    position: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")


def rank_of_truth(scores: np.ndarray, truth: int) -> int:
    """1 + #strictly better POIs + #equal-score POIs with a lower index."""
    scores = np.asarray(scores)
    if not 0 <= truth < len(scores):
        raise IndexError(f"truth index {truth} out of range")
    s = scores[truth]
    return int(1 + np.count_nonzero(scores > s) + np.count_nonzero(scores[:truth] == s))


def ranks_of_truth(scores: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """Row-wise ``rank_of_truth`` for a (Q, |P|) score matrix."""
    scores = np.atleast_2d(scores)
    truths = np.asarray(truths, dtype=np.int64)
    s = scores[np.arange(len(truths)), truths][:, None]
    better = (scores > s).sum(axis=1)
    lower = np.arange(scores.shape[1])[None, :] < truths[:, None]
    ties = ((scores == s) & lower).sum(axis=1)
    return 1 + better + ties


def _ranks(records) -> np.ndarray:
    ranks = np.array([r.rank if isinstance(r, PredictionRecord) else r for r in records])
    if ranks.size == 0:
        raise ValueError("no prediction records")
    return ranks


def acc_at_k(records: Sequence[PredictionRecord] | Sequence[int], k: int) -> float:
    return float(np.mean(_ranks(records) <= k))


def mrr(records: Sequence[PredictionRecord] | Sequence[int]) -> float:
    return float(np.mean(1.0 / _ranks(records)))


def summarize(ranks) -> dict[str, float]:
    out = {f"Acc@{k}": acc_at_k(ranks, k) for k in CUTOFFS}
    out["MRR"] = mrr(ranks)
    out["N"] = len(ranks)
    return out
