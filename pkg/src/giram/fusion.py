"""Consistency scores, adaptive weights, and the update / deployment stages."""

from __future__ import annotations

import json
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import Backbone, ModelPair
from .diffmath import softmax_np
from .ingest import DataBlock, Trajectory
from .keyenc import KeyEncoder
from .keygen import KeyGenerator
from .memory import InterestMemory, Outcome, UserMemory, topk_sparse
from .retrieval import RrfConfig, nearest_value, sustained_interest


@dataclass
class FusionConfig:
    alpha_base: float = 0.5
    beta_base: float = 0.5
    gamma: float = 0.5
    delta: float = 0.95
    top_k: int = 50
    n_keys: int = 20
    use_consistency: bool = True
    generative_retrieval: bool = True

    def __post_init__(self):
        if not (0 <= self.alpha_base <= 1 and 0 <= self.beta_base <= 1):
            raise ValueError("base weights must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass
class ConsistencyTable:
    scores: dict[str, float] = field(default_factory=dict)
    s_mean: float | None = None

    def score(self, user: str) -> float:
        """Users without a score inherit the mean, i.e. zero deviation."""
        if user in self.scores:
            return self.scores[user]
        return self.s_mean if self.s_mean is not None else 0.0

    def deviation(self, user: str) -> float:
        if self.s_mean is None:
            return 0.0
        return self.score(user) - self.s_mean

    def to_json(self) -> str:
        return json.dumps({"s_mean": self.s_mean,
                           "scores": {u: self.scores[u] for u in sorted(self.scores)}},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConsistencyTable":
        data = json.loads(text)
        return cls({u: float(s) for u, s in data["scores"].items()}, data["s_mean"])


def cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _by_user(trajs: Sequence[Trajectory]) -> dict[str, list[Trajectory]]:
    groups: dict[str, list[Trajectory]] = defaultdict(list)
    for t in trajs:
        groups[t.user_id].append(t)
    return {u: sorted(g, key=lambda t: t.end_time) for u, g in sorted(groups.items())}


def consistency_from_outputs(outputs_c: dict[str, Sequence[np.ndarray]],
                             outputs_p: dict[str, Sequence[np.ndarray]]) -> ConsistencyTable:
    """Cosine of each user's concatenated collective vs personalized outputs."""
    scores: dict[str, float] = {}
    undefined = []
    for u in outputs_c:
        s = cosine(np.concatenate(outputs_c[u]), np.concatenate(outputs_p[u]))
        if s is None:
            undefined.append(u)
        else:
            scores[u] = s
    s_mean = float(np.mean(list(scores.values()))) if scores else None
    for u in undefined:
        if s_mean is not None:
            scores[u] = s_mean
    return ConsistencyTable(scores, s_mean)


def consistency_scores(pair: ModelPair, block: DataBlock | Sequence[Trajectory]) -> ConsistencyTable:
    trajs = block.trajectories if isinstance(block, DataBlock) else list(block)
    groups = _by_user(trajs)
    ordered = [t for ts in groups.values() for t in ts]
    all_c = _scores(pair.collective, ordered)
    all_p = _scores(pair.personalized, ordered)
    out_c: dict[str, list[np.ndarray]] = {}
    out_p: dict[str, list[np.ndarray]] = {}
    pos = 0
    for u, ts in groups.items():
        out_c[u] = [softmax_np(s) for s in all_c[pos:pos + len(ts)]]
        out_p[u] = [softmax_np(s) for s in all_p[pos:pos + len(ts)]]
        pos += len(ts)
    return consistency_from_outputs(out_c, out_p)


def _scores(model: Backbone, trajs: Sequence[Trajectory]) -> list[np.ndarray]:
    many = getattr(model, "score_many", None)
    if many is not None:
        return many(trajs)
    return [model.score(t) for t in trajs]


def adaptive_weight(base: float, gamma: float, s_u: float, s_mean: float) -> float:
    return float(np.clip(base + gamma * (s_u - s_mean), 0.0, 1.0))


def fuse(sustained: np.ndarray, recent: np.ndarray, beta: float) -> np.ndarray:
    sustained = np.asarray(sustained, dtype=float)
    recent = np.asarray(recent, dtype=float)
    if sustained.shape != recent.shape:
        raise ValueError(f"dimension mismatch {sustained.shape} vs {recent.shape}")
    if not np.any(sustained):
        return recent.copy()
    return (1.0 - beta) * sustained + beta * recent


# ---------------------------------------------------------------- stages

def update_stage(memory: InterestMemory, pair: ModelPair, block: DataBlock | Sequence[Trajectory],
                 encoder: KeyEncoder, cfg: FusionConfig,
                 table: ConsistencyTable | None = None) -> tuple[ConsistencyTable, dict[Outcome, int]]:
    """One pass of the memory update over a block, user by user, oldest trajectory first."""
    trajs = block.trajectories if isinstance(block, DataBlock) else list(block)
    if table is None:
        table = consistency_scores(pair, trajs)
    groups = _by_user(trajs)
    ordered = [t for ts in groups.values() for t in ts]
    keys = encoder.encode_many(ordered) if ordered else []
    values = _scores(pair.personalized, ordered)
    tally = {o: 0 for o in Outcome}
    pos = 0
    for u, ts in groups.items():
        alpha = cfg.alpha_base
        if cfg.use_consistency:
            alpha = adaptive_weight(cfg.alpha_base, cfg.gamma, table.deviation(u), 0.0)
        mem = memory[u]
        for t in ts:
            v = topk_sparse(values[pos], cfg.top_k)
            tally[mem.apply_update(keys[pos], v, alpha, cfg.delta, t.end_time)] += 1
            pos += 1
    return table, tally


def trajectory_seed(seed: int, traj: Trajectory) -> np.random.Generator:
    """Per-trajectory stream so deployment results do not depend on processing order."""
    return np.random.default_rng([seed, zlib.crc32(traj.traj_id.encode())])


def fusion_weight(cfg: FusionConfig, table: ConsistencyTable, user: str) -> float:
    if not cfg.use_consistency:
        return cfg.beta_base
    return adaptive_weight(cfg.beta_base, cfg.gamma, table.deviation(user), 0.0)


def interest_vectors(mem: UserMemory | None, recent_scores: np.ndarray, keys: np.ndarray,
                     keygen: KeyGenerator | None, beta: float, cfg: FusionConfig,
                     rrf: RrfConfig, rng: np.random.Generator) -> np.ndarray:
    """Fused interest for each row of (recent_scores, keys); both are (Q, ...)."""
    recent = softmax_np(np.atleast_2d(recent_scores))
    keys = np.atleast_2d(keys)
    n_pois = recent.shape[1]
    if mem is None or len(mem) == 0:
        return recent
    if cfg.generative_retrieval:
        if keygen is None:
            raise ValueError("generative retrieval needs a trained key generator")
        queries = keygen.generate(keys, cfg.n_keys, rng)
        sustained = [sustained_interest(mem, q, n_pois, rrf) for q in queries]
    else:
        sustained = [nearest_value(mem, k, n_pois) for k in keys]
    return np.stack([fuse(s, r, beta) for s, r in zip(sustained, recent)])


def deployment_stage(mem: UserMemory | None, f_p: Backbone, keygen: KeyGenerator | None,
                     traj: Trajectory, encoder: KeyEncoder, table: ConsistencyTable,
                     cfg: FusionConfig, rrf: RrfConfig = RrfConfig(), seed: int = 0) -> np.ndarray:
    """Fused recommendation scores for the POI following the whole trajectory."""
    k = encoder.encode_key(traj)
    beta = fusion_weight(cfg, table, traj.user_id)
    return interest_vectors(mem, f_p.score(traj)[None], k[None], keygen, beta, cfg, rrf,
                            trajectory_seed(seed, traj))[0]


def deploy_prefixes(mem: UserMemory | None, recent_scores: np.ndarray, prefix_keys: np.ndarray,
                    keygen: KeyGenerator | None, traj: Trajectory, table: ConsistencyTable,
                    cfg: FusionConfig, rrf: RrfConfig, seed: int) -> np.ndarray:
    """Fused scores for every prefix of a test trajectory (row i predicts record i+1)."""
    beta = fusion_weight(cfg, table, traj.user_id)
    return interest_vectors(mem, recent_scores, prefix_keys, keygen, beta, cfg, rrf,
                            trajectory_seed(seed, traj))
