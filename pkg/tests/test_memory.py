import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from giram.memory import (InterestMemory, MemoryFormatError, Outcome, SparseScoreVec, UserMemory, combine_sparse,
                          load_memory, save_memory, topk_sparse)
from oracles import RefMemory


def sv(dim, pairs):
    idx = np.array(sorted(pairs), dtype=np.int64)
    return SparseScoreVec(dim, idx, np.array([pairs[i] for i in sorted(pairs)], dtype=float))


# ---------------------------------------------------------------- top-K

def test_topk_full_and_ties():
    full = topk_sparse(np.array([0.1, 2.0, -1.0]), 10)
    assert full.nnz == 3 and abs(full.probs.sum() - 1.0) < 1e-12
    tie = topk_sparse(np.zeros(4), 2)
    assert list(tie.indices) == [0, 1] and np.array_equal(tie.probs, [0.25, 0.25])


def test_topk_closed_form():
    v = topk_sparse(np.array([3.0, 1.0, 2.0]), 2)
    z = np.exp([3.0, 1.0, 2.0]).sum()
    assert list(v.indices) == [0, 2]
    np.testing.assert_allclose(v.probs, [np.exp(3) / z, np.exp(2) / z], rtol=1e-14)
    np.testing.assert_allclose(v.probs, [0.665, 0.245], atol=5e-4)


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=30), st.integers(1, 40))
def test_topk_properties(scores, k):
    v = topk_sparse(np.array(scores), k)
    assert v.nnz <= k and np.all(np.diff(v.indices) > 0)
    assert v.probs.sum() <= 1.0 + 1e-12
    # compare in probability space, where ties are broken toward the lower index
    probs = np.exp(np.array(scores) - max(scores))
    kept = set(int(i) for i in v.indices)
    dropped = [probs[i] for i in range(len(scores)) if i not in kept]
    if dropped and v.nnz:
        assert min(probs[i] for i in kept) >= max(dropped)


def test_combine_disjoint_supports():
    old = sv(6, {0: 0.5, 1: 0.3, 2: 0.2})
    new = sv(6, {3: 0.6, 4: 0.25, 5: 0.15})
    out = combine_sparse(old, new, 0.5, 3)
    # halved: 0.25 0.15 0.10 | 0.30 0.125 0.075 -> keep 3, 0, 1
    assert list(out.indices) == [0, 1, 3]
    np.testing.assert_array_equal(out.probs, [0.25, 0.15, 0.3])
    assert combine_sparse(old, new, 0.5, 6).nnz == 6


# ---------------------------------------------------------------- match / update / insert

def test_find_best_match():
    m = UserMemory(5, 3)
    assert m.find_best_match(np.ones(3)) is None
    rng = np.random.default_rng(0)
    keys = rng.standard_normal((5, 3))
    for i, k in enumerate(keys):
        m.insert_or_evict(k, sv(4, {0: 1.0}), i)
    q = rng.standard_normal(3)
    idx, sim = m.find_best_match(q)
    sims = [k @ q / np.linalg.norm(k) / np.linalg.norm(q) for k in keys]
    assert idx == int(np.argmax(sims)) and abs(sim - max(sims)) < 1e-12
    idx, sim = m.find_best_match(keys[3])
    assert idx == 3 and abs(sim - 1.0) < 1e-12


def test_update_entry_alpha_extremes():
    m = UserMemory(3, 3)
    k0, v0 = np.array([1.0, 0.0]), sv(4, {0: 0.7, 1: 0.3})
    m.insert_or_evict(k0, v0, 10)
    m.update_entry(0, np.array([0.0, 1.0]), sv(4, {2: 1.0}), 0.0, 20)
    assert np.array_equal(m.keys[0], k0) and m.values[0] == v0 and m.timestamps[0] == 20
    k1, v1 = np.array([0.3, 0.4]), sv(4, {3: 0.9})
    m.update_entry(0, k1, v1, 1.0, 30)
    assert np.array_equal(m.keys[0], k1) and m.values[0] == v1 and m.timestamps[0] == 30
    with pytest.raises(ValueError):
        m.update_entry(0, k1, v1, 1.5, 40)


def test_insert_and_evict_min_timestamp():
    m = UserMemory(4, 2)
    assert m.insert_or_evict(np.ones(2), sv(3, {0: 1.0}), 5) is Outcome.INSERTED and len(m) == 1
    for t in (9, 2, 7):
        m.insert_or_evict(np.ones(2) * t, sv(3, {0: 1.0}), t)
    assert m.insert_or_evict(np.array([5.0, -5.0]), sv(3, {1: 1.0}), 11) is Outcome.EVICTED
    assert m.timestamps == [5.0, 9.0, 11.0, 7.0]


def test_evict_tie_goes_to_slot_zero():
    m = UserMemory(3, 2)
    for i in range(3):
        m.insert_or_evict(np.array([1.0, i]), sv(3, {0: 1.0}), 4)
    m.insert_or_evict(np.array([-1.0, 0.0]), sv(3, {2: 1.0}), 4)
    assert np.array_equal(m.keys[0], [-1.0, 0.0])


def test_apply_update_strict_threshold():
    m = UserMemory(3, 2)
    m.apply_update(np.array([1.0, 0.0]), sv(3, {0: 1.0}), 0.5, 0.9, 1)
    # identical direction: similarity exactly 1.0, equal to delta -> no match
    assert m.apply_update(np.array([2.0, 0.0]), sv(3, {0: 1.0}), 0.5, 1.0, 2) is Outcome.INSERTED
    assert m.apply_update(np.array([-1.0, 0.1]), sv(3, {1: 1.0}), 0.5, -1.0, 3) is Outcome.MATCHED


def _random_value(rng, n_pois, k):
    return topk_sparse(rng.standard_normal(n_pois) * 3, k)


def _assert_same(m: UserMemory, ref: RefMemory):
    assert len(m) == len(ref.keys)
    for i in range(len(m)):
        assert np.array_equal(m.keys[i], ref.keys[i])
        assert np.array_equal(m.values[i].dense(), np.array(ref.values[i]))
        assert m.timestamps[i] == ref.times[i]


def run_stream(seed, capacity, n_updates, n_pois=12, d=5):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n_pois + 1))
    m, ref = UserMemory(capacity, k), RefMemory(capacity, k)
    delta = float(rng.uniform(-0.2, 0.99))
    for step in range(n_updates):
        if len(ref.keys) and rng.random() < 0.4:
            # near-duplicate of a stored key so the match path is exercised
            key = ref.keys[int(rng.integers(len(ref.keys)))] + 0.05 * rng.standard_normal(d)
        else:
            key = rng.standard_normal(d)
        v = _random_value(rng, n_pois, k)
        alpha = float(rng.uniform(0, 1))
        t = int(rng.integers(0, 30))  # repeated timestamps exercise the tie rule
        got = m.apply_update(key, v, alpha, delta, t)
        want = ref.update(key, v.dense().tolist(), alpha, delta, t)
        assert got.value == want, f"step {step}"
        _assert_same(m, ref)
    return m


def test_fifty_updates_match_reference():
    run_stream(seed=7, capacity=5, n_updates=50)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3, 5]))
def test_random_streams_match_reference(seed, capacity):
    run_stream(seed, capacity, 30)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 8))
def test_capacity_and_sparsity_invariants(seed, capacity, k):
    rng = np.random.default_rng(seed)
    m = UserMemory(capacity, k)
    for t in range(40):
        key = rng.standard_normal(3)
        m.apply_update(key, _random_value(rng, 10, k), float(rng.uniform()), float(rng.uniform(-1, 1)), t)
        assert len(m) <= capacity
        assert all(v.nnz <= k for v in m.values)


# ---------------------------------------------------------------- persistence

def _populated(seed=0):
    rng = np.random.default_rng(seed)
    mem = InterestMemory(capacity=4, top_k=3)
    for u in ("alice", "bob", "carol"):
        for t in range(6):
            mem[u].apply_update(rng.standard_normal(5), _random_value(rng, 9, 3), 0.5, 0.95, t * 1.5)
    return mem


def test_snapshot_round_trips(tmp_path):
    empty = InterestMemory(7, 2)
    save_memory(empty, tmp_path / "e.npz")
    assert load_memory(tmp_path / "e.npz") == empty
    mem = _populated()
    save_memory(mem, tmp_path / "m.npz")
    back = load_memory(tmp_path / "m.npz")
    assert back == mem
    assert back.payload_bytes() == mem.payload_bytes()


def test_snapshot_truncated_and_version(tmp_path):
    path = tmp_path / "m.npz"
    save_memory(_populated(), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(MemoryFormatError):
        load_memory(path)
    save_memory(_populated(), path)
    with np.load(path, allow_pickle=False) as f:
        arrays = {k: f[k] for k in f.files}
    arrays["version"] = np.array([99])
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    with pytest.raises(MemoryFormatError, match="version"):
        load_memory(path)


def test_interest_memory_autocreates_and_equality():
    mem = InterestMemory(2, 2)
    assert mem.get("x") is None
    assert len(mem["x"]) == 0 and mem.get("x") is not None
    assert mem == InterestMemory(2, 2)
