import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from giram.backbone import Backbone, ModelPair
from giram.diffmath import softmax_np
from giram.fusion import (ConsistencyTable, FusionConfig, adaptive_weight, consistency_from_outputs,
                          consistency_scores, deployment_stage, fuse, update_stage)
from giram.ingest import CheckIn, Trajectory
from giram.memory import InterestMemory, Outcome, SparseScoreVec, UserMemory, topk_sparse
from giram.retrieval import RrfConfig
import oracles

T0 = 1_600_000_000


class TableModel(Backbone):
    """Scores looked up by trajectory id; unknown trajectories get a fixed default."""

    def __init__(self, table, n_pois, default=None):
        self.table, self._n = table, n_pois
        self.default = np.zeros(n_pois) if default is None else np.asarray(default, float)

    @property
    def n_pois(self):
        return self._n

    def score(self, traj):
        return np.asarray(self.table.get(traj.traj_id, self.default), float)

    def score_prefixes(self, traj):
        return np.stack([self.score(traj)] * (len(traj) - 1))

    def fit(self, trajectories, epochs, seed):
        return []

    def clone(self):
        return TableModel(dict(self.table), self._n, self.default)

    def state_dict(self):
        return {}


class FixedKeys:
    """Stand-in encoder: each trajectory id maps to a fixed key."""

    def __init__(self, keys):
        self.keys = keys

    def encode_key(self, traj):
        return np.asarray(self.keys[traj.traj_id], float)

    def encode_many(self, trajs, prefixes=False):
        return [self.encode_key(t) for t in trajs]


def traj(user, start, pois=("a", "b")):
    return Trajectory(user, tuple(CheckIn(user, p, 40.0, -74.0, start + 60 * i, "c") for i, p in enumerate(pois)))


# ---------------------------------------------------------------- consistency and weights

def test_consistency_hand_outputs():
    c = {"u": [np.array([1.0, 0.0])], "v": [np.array([1.0, 0.0])]}
    p = {"u": [np.array([1.0, 0.0])], "v": [np.array([0.0, 1.0])]}
    table = consistency_from_outputs(c, p)
    assert table.scores == {"u": 1.0, "v": 0.0} and table.s_mean == 0.5
    scaled = consistency_from_outputs({"u": [np.array([0.2, 0.3, 0.5])]}, {"u": [np.array([0.4, 0.6, 1.0])]})
    assert abs(scaled.scores["u"] - 1.0) < 1e-12


def test_consistency_concatenates_trajectories_in_order():
    c = {"u": [np.array([1.0, 2.0]), np.array([0.5, 0.1])]}
    p = {"u": [np.array([0.3, 2.0]), np.array([0.9, 0.4])]}
    want = oracles.cosine([1.0, 2.0, 0.5, 0.1], [0.3, 2.0, 0.9, 0.4])
    assert abs(consistency_from_outputs(c, p).scores["u"] - want) < 1e-12


def test_consistency_zero_output_gets_mean():
    c = {"u": [np.ones(2)], "v": [np.zeros(2)]}
    p = {"u": [np.array([1.0, 0.0])], "v": [np.ones(2)]}
    table = consistency_from_outputs(c, p)
    assert table.scores["v"] == table.s_mean == table.scores["u"]
    assert table.deviation("v") == 0.0 and table.deviation("stranger") == 0.0


def test_consistency_table_json_round_trip():
    table = ConsistencyTable({"b": 0.25, "a": 0.75}, 0.5)
    assert ConsistencyTable.from_json(table.to_json()) == table


def test_consistency_scores_on_models():
    trajs = [traj("u", T0), traj("u", T0 + 10_000), traj("v", T0 + 500)]
    out = {t.traj_id: np.array([i, 1.0, -i]) for i, t in enumerate(trajs)}
    pair = ModelPair(TableModel(out, 3), TableModel({k: 2 * v for k, v in out.items()}, 3))
    table = consistency_scores(pair, trajs)
    c = {u: np.concatenate([softmax_np(out[t.traj_id]) for t in trajs if t.user_id == u]) for u in "uv"}
    p = {u: np.concatenate([softmax_np(2 * out[t.traj_id]) for t in trajs if t.user_id == u]) for u in "uv"}
    for u in "uv":
        assert abs(table.scores[u] - oracles.cosine(c[u], p[u])) < 1e-12
    same = consistency_scores(ModelPair(pair.collective, pair.collective), trajs)
    assert all(abs(s - 1.0) < 1e-12 for s in same.scores.values())


def test_adaptive_weight_examples():
    assert adaptive_weight(0.5, 0.5, 0.9, 0.7) == pytest.approx(0.6, abs=1e-15)
    assert adaptive_weight(0.5, 0.5, 1.0, 0.8) == pytest.approx(0.6, abs=1e-15)
    assert adaptive_weight(0.9, 10.0, 1.0, 0.5) == 1.0
    assert adaptive_weight(0.1, 10.0, 0.0, 0.5) == 0.0
    assert adaptive_weight(0.3, 0.0, 0.1, 0.9) == 0.3


def test_fuse_examples():
    s, r = np.array([0.2, 0.8, 0.0]), np.array([0.6, 0.2, 0.2])
    np.testing.assert_allclose(fuse(s, r, 0.5), [0.4, 0.5, 0.1], atol=1e-15)
    assert np.array_equal(fuse(s, r, 0.0), s) and np.array_equal(fuse(s, r, 1.0), r)
    assert np.array_equal(fuse(np.zeros(3), r, 0.1), r)
    with pytest.raises(ValueError):
        fuse(s, r[:2], 0.5)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_fuse_argmax_dominance(seed, beta):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    j = int(rng.integers(n))
    s, r = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    s[j], r[j] = s.max() + 0.1, r.max() + 0.1
    assert int(np.argmax(fuse(s, r, beta))) == j


# ---------------------------------------------------------------- update stage

def test_update_stage_empty_block():
    mem = InterestMemory(3, 2)
    pair = ModelPair(TableModel({}, 3), TableModel({}, 3))
    table, tally = update_stage(mem, pair, [], FixedKeys({}), FusionConfig(top_k=2))
    assert len(mem.users) == 0 and sum(tally.values()) == 0 and table.s_mean is None


def test_update_stage_single_insertion():
    t = traj("u", T0)
    scores = np.array([3.0, 1.0, 2.0])
    pair = ModelPair(TableModel({t.traj_id: scores}, 3), TableModel({t.traj_id: scores}, 3))
    mem = InterestMemory(3, 2)
    _, tally = update_stage(mem, pair, [t], FixedKeys({t.traj_id: [1.0, 0.0]}), FusionConfig(top_k=2))
    assert tally[Outcome.INSERTED] == 1
    m = mem["u"]
    assert len(m) == 1 and np.array_equal(m.keys[0], [1.0, 0.0]) and m.timestamps[0] == t.end_time
    assert m.values[0] == topk_sparse(scores, 2)


def test_update_stage_matches_reference():
    """Two users, six trajectories (given out of order), against the straight-line reference memory."""
    rng = np.random.default_rng(5)
    trajs = [traj(u, T0 + 1000 * i + (7 if u == "v" else 0)) for i in (3, 0, 2) for u in ("u", "v")]
    keys = {t.traj_id: rng.standard_normal(4) for t in trajs}
    keys[trajs[1].traj_id] = keys[trajs[0].traj_id] * 2 + 0.01  # force a match for u
    out_c = {t.traj_id: rng.standard_normal(6) for t in trajs}
    out_p = {k: v + rng.standard_normal(6) for k, v in out_c.items()}
    pair = ModelPair(TableModel(out_c, 6), TableModel(out_p, 6))
    cfg = FusionConfig(top_k=3, delta=0.9, gamma=0.5)
    mem = InterestMemory(2, 3)
    table, tally = update_stage(mem, pair, trajs, FixedKeys(keys), cfg)

    for u in ("u", "v"):
        ref = oracles.RefMemory(2, 3)
        mine = sorted((t for t in trajs if t.user_id == u), key=lambda t: t.end_time)
        c = np.concatenate([softmax_np(out_c[t.traj_id]) for t in mine])
        p = np.concatenate([softmax_np(out_p[t.traj_id]) for t in mine])
        s_u = oracles.cosine(c, p)
        assert abs(table.scores[u] - s_u) < 1e-12
        alpha = min(1.0, max(0.0, 0.5 + 0.5 * (s_u - table.s_mean)))
        for t in mine:
            v = oracles.truncate_top(oracles.softmax(out_p[t.traj_id].tolist()), 3)
            ref.update(keys[t.traj_id], v, alpha, 0.9, t.end_time)
        m = mem[u]
        assert len(m) == len(ref.keys)
        for i in range(len(m)):
            np.testing.assert_allclose(m.keys[i], ref.keys[i], rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(m.values[i].dense(), ref.values[i], rtol=1e-12, atol=1e-14)
            assert m.timestamps[i] == ref.times[i]
    assert sum(tally.values()) == 6 and tally[Outcome.MATCHED] >= 1


def test_update_stage_without_consistency_uses_base_alpha():
    t1, t2 = traj("u", T0), traj("u", T0 + 100)
    keys = {t1.traj_id: [1.0, 0.0], t2.traj_id: [1.0, 0.01]}
    pair = ModelPair(TableModel({t1.traj_id: [5.0, 0, 0]}, 3),
                     TableModel({t1.traj_id: [5.0, 0, 0], t2.traj_id: [0, 5.0, 0]}, 3))
    mem = InterestMemory(3, 3)
    cfg = FusionConfig(top_k=3, alpha_base=0.25, use_consistency=False)
    update_stage(mem, pair, [t1, t2], FixedKeys(keys), cfg, table=ConsistencyTable({"u": 0.0}, 0.9))
    a, b = softmax_np(np.array([5.0, 0, 0])), softmax_np(np.array([0, 5.0, 0]))
    np.testing.assert_allclose(mem["u"].values[0].dense(), 0.75 * a + 0.25 * b, rtol=1e-14)


# ---------------------------------------------------------------- deployment stage

class FixedGenerator:
    """Key generator that returns a preset query block, ignoring the input key."""

    def __init__(self, queries):
        self.queries = np.asarray(queries, float)

    def generate(self, keys, n_keys, rng):
        return np.repeat(self.queries[None], len(np.atleast_2d(keys)), axis=0)


def test_deployment_empty_memory_returns_recent():
    t = traj("u", T0)
    f_p = TableModel({t.traj_id: [1.0, 2.0, 0.5]}, 3)
    enc = FixedKeys({t.traj_id: [0.1, 0.2]})
    for mem in (None, UserMemory(3, 2)):
        out = deployment_stage(mem, f_p, None, t, enc, ConsistencyTable(), FusionConfig())
        np.testing.assert_array_equal(out, softmax_np(np.array([1.0, 2.0, 0.5])))


def test_deployment_beta_zero_single_entry():
    t = traj("u", T0)
    mem = UserMemory(3, 2)
    v = SparseScoreVec(3, np.array([0, 2]), np.array([0.7, 0.2]))
    mem.insert_or_evict(np.array([1.0, 0.0]), v, 1)
    cfg = FusionConfig(beta_base=0.0, use_consistency=False, n_keys=4)
    out = deployment_stage(mem, TableModel({}, 3), FixedGenerator(np.ones((4, 2))), t,
                           FixedKeys({t.traj_id: [0.3, 0.3]}), ConsistencyTable(), cfg)
    np.testing.assert_allclose(out, v.dense(), atol=1e-15)


def test_deployment_three_poi_toy():
    t = traj("u", T0)
    mem = UserMemory(3, 3)
    keys = [[1.0, 0.0], [0.0, 1.0]]
    vals = [SparseScoreVec(3, np.array([0]), np.array([1.0])), SparseScoreVec(3, np.array([1]), np.array([1.0]))]
    for i, (k, v) in enumerate(zip(keys, vals)):
        mem.insert_or_evict(np.array(k), v, i)
    queries = [[1.0, 0.1], [0.9, 0.0]]
    recent = np.array([0.0, 0.0, 1.0])
    cfg = FusionConfig(beta_base=0.5, use_consistency=False, n_keys=2)
    out = deployment_stage(mem, TableModel({t.traj_id: recent}, 3), FixedGenerator(queries), t,
                           FixedKeys({t.traj_id: [0.5, 0.5]}), ConsistencyTable(), cfg)
    sustained = oracles.sustained(keys, [v.dense().tolist() for v in vals], queries, 50.0, 3)
    want = 0.5 * np.array(sustained) + 0.5 * softmax_np(recent)
    np.testing.assert_allclose(out, want, rtol=0, atol=1e-12)
    assert abs(out.sum() - 1.0) < 1e-12


def test_deployment_needs_generator_when_memory_is_populated():
    t = traj("u", T0)
    mem = UserMemory(2, 2)
    mem.insert_or_evict(np.ones(2), SparseScoreVec(3, np.array([0]), np.array([1.0])), 0)
    with pytest.raises(ValueError):
        deployment_stage(mem, TableModel({}, 3), None, t, FixedKeys({t.traj_id: [1.0, 1.0]}),
                         ConsistencyTable(), FusionConfig())


def test_deployment_no_generative_retrieval_uses_nearest():
    t = traj("u", T0)
    mem = UserMemory(3, 2)
    mem.insert_or_evict(np.array([1.0, 0.0]), SparseScoreVec(2, np.array([0]), np.array([1.0])), 0)
    mem.insert_or_evict(np.array([0.0, 1.0]), SparseScoreVec(2, np.array([1]), np.array([1.0])), 1)
    cfg = FusionConfig(beta_base=0.0, use_consistency=False, generative_retrieval=False)
    out = deployment_stage(mem, TableModel({}, 2), None, t, FixedKeys({t.traj_id: [0.1, 0.9]}),
                           ConsistencyTable(), cfg, RrfConfig())
    assert np.array_equal(out, [0.0, 1.0])


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(alpha_base=1.5)
    with pytest.raises(ValueError):
        FusionConfig(gamma=-0.1)
