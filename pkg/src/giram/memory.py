"""Per-user interest memory of (key, sparse top-K value, timestamp) triples."""

from __future__ import annotations

import enum
import zipfile
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .diffmath import softmax_np

FORMAT_VERSION = 1


class MemoryFormatError(ValueError):
    """Snapshot file is corrupt or written by an incompatible version."""


@dataclass(frozen=True)
class SparseScoreVec:
    """At most K (index, probability) pairs; indices ascending and unique."""

    dim: int
    indices: np.ndarray  # int64
    probs: np.ndarray  # float64

    def __post_init__(self):
        if len(self.indices) != len(self.probs):
            raise ValueError("indices and probs differ in length")

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.probs
        return out

    def __eq__(self, other) -> bool:
        return (isinstance(other, SparseScoreVec) and self.dim == other.dim
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.probs, other.probs))


def _keep_top(indices: np.ndarray, probs: np.ndarray, k: int, dim: int) -> SparseScoreVec:
    # largest probability first, lower index wins ties
    order = np.lexsort((indices, -probs))[:k]
    keep = np.sort(order)
    idx, pr = indices[keep], probs[keep]
    nz = pr > 0
    return SparseScoreVec(dim, idx[nz].astype(np.int64), pr[nz].astype(np.float64))


def topk_sparse(scores: np.ndarray, k: int) -> SparseScoreVec:
    """Softmax over raw scores, keep the K largest, no renormalization."""
    if k < 1:
        raise ValueError("K must be >= 1")
    p = softmax_np(np.asarray(scores, dtype=float))
    return _keep_top(np.arange(len(p)), p, k, len(p))


def combine_sparse(old: SparseScoreVec, new: SparseScoreVec, alpha: float, k: int) -> SparseScoreVec:
    """(1 - alpha) * old + alpha * new, re-truncated to the K largest entries."""
    idx = np.union1d(old.indices, new.indices)
    probs = np.zeros(len(idx))
    probs[np.searchsorted(idx, old.indices)] += (1.0 - alpha) * old.probs
    probs[np.searchsorted(idx, new.indices)] += alpha * new.probs
    return _keep_top(idx, probs, k, old.dim)


@dataclass
class MemoryEntry:
    key: np.ndarray
    value: SparseScoreVec
    timestamp: float


class Outcome(enum.Enum):
    MATCHED = "matched"
    INSERTED = "inserted"
    EVICTED = "evicted"


def cosine_rows(keys: np.ndarray, k: np.ndarray) -> np.ndarray:
    kn = np.linalg.norm(k)
    norms = np.linalg.norm(keys, axis=-1)
    if kn == 0 or np.any(norms == 0):
        raise ValueError("cosine similarity with a zero-norm key")
    return (keys @ k) / (norms * kn)


class UserMemory:
    """Capacity-bounded entry list; slot order is insertion order (evictions reuse the slot)."""

    def __init__(self, capacity: int, top_k: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.top_k = top_k
        self.keys: list[np.ndarray] = []
        self.values: list[SparseScoreVec] = []
        self.timestamps: list[float] = []
        self._key_matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self) -> Iterator[MemoryEntry]:
        for k, v, t in zip(self.keys, self.values, self.timestamps):
            yield MemoryEntry(k, v, t)

    @property
    def entries(self) -> list[MemoryEntry]:
        return list(self)

    def key_matrix(self) -> np.ndarray:
        if self._key_matrix is None:
            self._key_matrix = np.array(self.keys, dtype=float).reshape(len(self.keys), -1)
        return self._key_matrix

    def _set(self, i: int, key, value, t) -> None:
        self.keys[i] = np.array(key, dtype=float)
        self.values[i] = value
        self.timestamps[i] = float(t)
        self._key_matrix = None

    def find_best_match(self, k: np.ndarray) -> tuple[int, float] | None:
        if not self.keys:
            return None
        sims = cosine_rows(self.key_matrix(), np.asarray(k, dtype=float))
        i = int(np.argmax(sims))  # first maximum = earliest slot
        return i, float(sims[i])

    def update_entry(self, idx: int, k, v: SparseScoreVec, alpha: float, t) -> None:
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha {alpha} outside [0, 1]")
        key = (1.0 - alpha) * self.keys[idx] + alpha * np.asarray(k, dtype=float)
        self._set(idx, key, combine_sparse(self.values[idx], v, alpha, self.top_k), t)

    def insert_or_evict(self, k, v: SparseScoreVec, t) -> Outcome:
        if len(self.keys) < self.capacity:
            self.keys.append(np.array(k, dtype=float))
            self.values.append(v)
            self.timestamps.append(float(t))
            self._key_matrix = None
            return Outcome.INSERTED
        oldest = int(np.argmin(self.timestamps))
        self._set(oldest, k, v, t)
        return Outcome.EVICTED

    def apply_update(self, k, v: SparseScoreVec, alpha: float, delta: float, t) -> Outcome:
        match = self.find_best_match(k)
        if match is not None and match[1] > delta:
            self.update_entry(match[0], k, v, alpha, t)
            return Outcome.MATCHED
        return self.insert_or_evict(k, v, t)

    def __eq__(self, other) -> bool:
        return (isinstance(other, UserMemory) and self.capacity == other.capacity
                and self.top_k == other.top_k and len(self) == len(other)
                and all(np.array_equal(a, b) for a, b in zip(self.keys, other.keys))
                and self.values == other.values and self.timestamps == other.timestamps)


class InterestMemory:
    def __init__(self, capacity: int = 100, top_k: int = 50):
        self.capacity = capacity
        self.top_k = top_k
        self.users: dict[str, UserMemory] = {}

    def __getitem__(self, user: str) -> UserMemory:
        mem = self.users.get(user)
        if mem is None:
            mem = self.users[user] = UserMemory(self.capacity, self.top_k)
        return mem

    def get(self, user: str) -> UserMemory | None:
        return self.users.get(user)

    def __len__(self) -> int:
        return sum(len(m) for m in self.users.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, InterestMemory):
            return False
        mine = {u: m for u, m in self.users.items() if len(m)}
        theirs = {u: m for u, m in other.users.items() if len(m)}
        return (self.capacity == other.capacity and self.top_k == other.top_k
                and mine.keys() == theirs.keys() and all(mine[u] == theirs[u] for u in mine))

    def payload_bytes(self) -> int:
        """Bytes of keys, sparse values and timestamps actually held."""
        total = 0
        for m in self.users.values():
            for k, v in zip(m.keys, m.values):
                total += k.size * 8 + v.nnz * 12 + 8
        return total


# ---------------------------------------------------------------- persistence

def save_memory(memory: InterestMemory, path) -> None:
    """Versioned .npz container: float64 for keys and timestamps and probabilities; int32 for indices.

    Every value shares one dimension (the POI count), stored once in the header.
    """
    users = sorted(u for u, m in memory.users.items() if len(m))
    counts, keys, nnz, idx, probs, ts = [], [], [], [], [], []
    dims = set()
    for u in users:
        m = memory.users[u]
        counts.append(len(m))
        for k, v, t in zip(m.keys, m.values, m.timestamps):
            keys.append(k)
            nnz.append(v.nnz)
            idx.append(v.indices)
            probs.append(v.probs)
            ts.append(t)
            dims.add(v.dim)
    if len(dims) > 1:
        raise ValueError(f"values of mixed dimension {sorted(dims)} cannot share a snapshot")
    d_k = len(keys[0]) if keys else 0
    dim = dims.pop() if dims else 0
    arrays = {
        "version": np.array([FORMAT_VERSION], dtype=np.int64),
        "config": np.array([memory.capacity, memory.top_k, d_k, dim], dtype=np.int64),
        "users": np.array(users, dtype=np.str_),
        "counts": np.array(counts, dtype=np.int64),
        "keys": np.array(keys, dtype=np.float64).reshape(len(keys), d_k),
        "nnz": np.array(nnz, dtype=np.int32),
        "indices": np.concatenate(idx).astype(np.int32) if idx else np.zeros(0, np.int32),
        "probs": np.concatenate(probs) if probs else np.zeros(0),
        "timestamps": np.array(ts, dtype=np.float64),
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_memory(path) -> InterestMemory:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, ValueError, EOFError, OSError, KeyError) as exc:
        raise MemoryFormatError(f"corrupt memory snapshot {path}: {exc}") from exc
    try:
        version = int(arrays["version"][0])
        if version != FORMAT_VERSION:
            raise MemoryFormatError(f"snapshot version {version}, expected {FORMAT_VERSION}")
        capacity, top_k, _, dim = (int(x) for x in arrays["config"])
        memory = InterestMemory(capacity, top_k)
        row = 0
        off = 0
        for u, count in zip(arrays["users"], arrays["counts"]):
            m = memory[str(u)]
            for _ in range(int(count)):
                n = int(arrays["nnz"][row])
                v = SparseScoreVec(dim,
                                   arrays["indices"][off:off + n].astype(np.int64),
                                   arrays["probs"][off:off + n].copy())
                m.keys.append(arrays["keys"][row].copy())
                m.values.append(v)
                m.timestamps.append(float(arrays["timestamps"][row]))
                off += n
                row += 1
    except (KeyError, IndexError, ValueError, TypeError) as exc:
        if isinstance(exc, MemoryFormatError):
            raise
        raise MemoryFormatError(f"corrupt memory snapshot {path}: {exc}") from exc
    return memory
