"""Pluggable next-POI scorer plus the Static / Finetune / Retrain drivers.

The reference model is deliberately plain: POI embedding -> LSTM, with the
user embedding added through its own slice of the linear scoring head.
"""

from __future__ import annotations

import abc
import copy
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import diffmath as dm
from .ingest import DataBlock, DataError, Trajectory, Vocab


@dataclass
class BackboneConfig:
    poi_dim: int = 32
    user_dim: int = 16
    hidden: int = 64
    epochs: int = 10
    finetune_epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


class Backbone(abc.ABC):
    """Anything that maps a trajectory to raw next-POI scores over the fixed vocabulary."""

    freeze_user: bool = False

    @property
    @abc.abstractmethod
    def n_pois(self) -> int: ...

    @abc.abstractmethod
    def score(self, traj: Trajectory) -> np.ndarray:
        """Raw scores for the POI following the full trajectory."""

    @abc.abstractmethod
    def score_prefixes(self, traj: Trajectory) -> np.ndarray:
        """(len-1, |P|) scores; row i predicts record i+1 from records[:i+1]."""

    @abc.abstractmethod
    def fit(self, trajectories: Sequence[Trajectory], epochs: int, seed: int) -> list[float]:
        """Cross-entropy training over all within-trajectory next-step pairs."""

    @abc.abstractmethod
    def clone(self) -> "Backbone": ...

    @abc.abstractmethod
    def state_dict(self) -> dict[str, np.ndarray]: ...


class RecurrentBackbone(Backbone):
    def __init__(self, vocab: Vocab, config: BackboneConfig | None = None):
        self.vocab = vocab
        self.config = config or BackboneConfig()
        cfg = self.config
        ps = dm.ParameterSet(cfg.seed)
        ps.table("poi_emb", vocab.n_pois, cfg.poi_dim)
        ps.table("user_emb", len(vocab.users), cfg.user_dim)
        self.lstm = ps.lstm("rnn", cfg.poi_dim, cfg.hidden)
        ps.matrix("head.W_h", vocab.n_pois, cfg.hidden)
        ps.matrix("head.W_u", vocab.n_pois, cfg.user_dim)
        ps.bias("head.b", vocab.n_pois)
        self.params = ps
        self.adam = dm.AdamState(lr=cfg.lr)
        self.freeze_user = False

    @property
    def n_pois(self) -> int:
        return self.vocab.n_pois

    # -- forward ---------------------------------------------------------

    def _logits(self, pois: np.ndarray, users: np.ndarray, steps: int) -> dm.Tensor:
        """Logits for the first ``steps`` positions of a (B, L) id batch, flattened to (B*steps, |P|)."""
        p = self.params
        B = pois.shape[0]
        inputs = [dm.embedding_lookup(p["poi_emb"], pois[:, t]) for t in range(steps)]
        states = dm.recurrent_states(inputs, self.lstm)
        H = dm.reshape(dm.stack(states, axis=1), (B * steps, -1))
        user_part = dm.matmul(dm.embedding_lookup(p["user_emb"], users), dm._transpose(p["head.W_u"]))
        rows = np.repeat(np.arange(B), steps)
        return dm.add(dm.linear(H, p["head.W_h"], p["head.b"]), user_part[rows])

    def _ids(self, traj: Trajectory) -> tuple[np.ndarray, int]:
        try:
            user = self.vocab.users[traj.user_id]
        except KeyError:
            raise DataError(f"unknown user {traj.user_id!r}") from None
        return self.vocab.poi_ids(traj), user

    def score_prefixes(self, traj: Trajectory) -> np.ndarray:
        pois, user = self._ids(traj)
        return self._logits(pois[None, :], np.array([user]), len(pois) - 1).value

    def score(self, traj: Trajectory) -> np.ndarray:
        pois, user = self._ids(traj)
        return self._logits(pois[None, :], np.array([user]), len(pois)).value[-1]

    def score_many(self, trajs: Sequence[Trajectory], prefixes: bool = False) -> list[np.ndarray]:
        """Batched ``score`` (or ``score_prefixes``), same order as ``trajs``."""
        out: list[np.ndarray | None] = [None] * len(trajs)
        for L, idx in _length_buckets(trajs).items():
            pois = np.stack([self.vocab.poi_ids(trajs[i]) for i in idx])
            users = np.array([self.vocab.users[trajs[i].user_id] for i in idx])
            steps = L - 1 if prefixes else L
            logits = self._logits(pois, users, steps).value.reshape(len(idx), steps, -1)
            for j, i in enumerate(idx):
                out[i] = logits[j] if prefixes else logits[j, -1]
        return out  # type: ignore[return-value]

    # -- training --------------------------------------------------------

    def loss(self, pois: np.ndarray, users: np.ndarray) -> dm.Tensor:
        steps = pois.shape[1] - 1
        logits = self._logits(pois, users, steps)
        return dm.cross_entropy(logits, pois[:, 1:].reshape(-1))

    def fit(self, trajectories: Sequence[Trajectory], epochs: int, seed: int) -> list[float]:
        """Returns the mean training loss of each epoch."""
        if not trajectories:
            raise DataError("cannot train on an empty block")
        rng = np.random.default_rng(seed)
        batches = _make_batches(self.vocab, trajectories, self.config.batch_size)
        frozen = {"user_emb"} if self.freeze_user else set()
        history = []
        for _ in range(epochs):
            total, count = 0.0, 0
            for b in rng.permutation(len(batches)):
                pois, users = batches[b]
                self.params.zero_grad()
                loss = self.loss(pois, users)
                loss.backward()
                n = pois.shape[0] * (pois.shape[1] - 1)
                total += float(loss.value) * n
                count += n
                dm.adam_step(self.params, dm.collect_grads(self.params), self.adam, frozen)
            history.append(total / count)
        self.params.zero_grad()
        return history

    def mean_loss(self, trajectories: Sequence[Trajectory]) -> float:
        total, count = 0.0, 0
        for pois, users in _make_batches(self.vocab, trajectories, 256):
            n = pois.shape[0] * (pois.shape[1] - 1)
            total += float(self.loss(pois, users).value) * n
            count += n
        return total / count

    def clone(self) -> "RecurrentBackbone":
        twin = copy.deepcopy(self)
        twin.vocab = self.vocab
        return twin

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.params.load_state_dict(state)

    def optimizer_state(self) -> dict[str, np.ndarray]:
        """Adam moments and step count, flattened for a checkpoint file."""
        out = {"adam.step": np.array(self.adam.step)}
        out.update({f"adam.m.{k}": v for k, v in self.adam.m.items()})
        out.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        return out

    def load_optimizer_state(self, state: dict[str, np.ndarray]) -> None:
        self.adam.step = int(state["adam.step"])
        self.adam.m = {k[7:]: np.array(v) for k, v in state.items() if k.startswith("adam.m.")}
        self.adam.v = {k[7:]: np.array(v) for k, v in state.items() if k.startswith("adam.v.")}


def _length_buckets(trajs: Sequence[Trajectory]) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = defaultdict(list)
    for i, t in enumerate(trajs):
        buckets[len(t)].append(i)
    return dict(sorted(buckets.items()))


def _make_batches(vocab: Vocab, trajs: Sequence[Trajectory], size: int):
    batches = []
    for _, idx in _length_buckets(trajs).items():
        for lo in range(0, len(idx), size):
            chunk = idx[lo:lo + size]
            pois = np.stack([vocab.poi_ids(trajs[i]) for i in chunk])
            users = np.array([vocab.users[trajs[i].user_id] for i in chunk])
            batches.append((pois, users))
    return batches


# ---------------------------------------------------------------- drivers

def score_trajectory(model: Backbone, traj: Trajectory) -> np.ndarray:
    return model.score(traj)


def _trajectories(blocks: Iterable[DataBlock]) -> list[Trajectory]:
    out: list[Trajectory] = []
    for b in sorted(blocks, key=lambda b: b.index):
        out.extend(b.trajectories)
    return out


def train_base(base: DataBlock, vocab: Vocab, config: BackboneConfig) -> RecurrentBackbone:
    if not base.trajectories:
        raise DataError("base block has no trajectories")
    model = RecurrentBackbone(vocab, config)
    model.fit(base.trajectories, config.epochs, seed=config.seed)
    return model


def finetune(model: Backbone, block: DataBlock, epochs: int | None = None, seed: int = 0) -> Backbone:
    """A finetuned copy; the input model is left untouched."""
    if not block.trajectories:
        raise DataError(f"block {block.index} has no trajectories")
    if epochs is None:
        epochs = getattr(getattr(model, "config", None), "finetune_epochs", 10)
    out = model.clone()
    out.fit(block.trajectories, epochs, seed=seed)
    return out


@dataclass
class ModelPair:
    collective: Backbone
    personalized: Backbone


def make_model_pair(model: Backbone, block: DataBlock, epochs: int | None = None,
                    seed: int = 0) -> ModelPair:
    """Finetune two copies identically except that the collective one keeps user embeddings fixed."""
    frozen = model.clone()
    frozen.freeze_user = True
    free = model.clone()
    free.freeze_user = False
    return ModelPair(collective=finetune(frozen, block, epochs, seed),
                     personalized=finetune(free, block, epochs, seed))


def retrain_all(blocks: Sequence[DataBlock], vocab: Vocab, config: BackboneConfig) -> RecurrentBackbone:
    trajs = _trajectories(blocks)
    if not trajs:
        raise DataError("no trajectories to retrain on")
    model = RecurrentBackbone(vocab, config)
    model.fit(trajs, config.epochs, seed=config.seed)
    return model
