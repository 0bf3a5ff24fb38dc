import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from giram.ingest import (WEEK, CategoryMap, CheckIn, ConfigError, DataBlock, DataError, GridSpec,
                          Trajectory, assign_region, build_trajectories, filter_sparse, load_category_map,
                          load_checkins, map_category, partition_blocks, prepare, split_val_test,
                          write_category_map, write_checkins)

DAY = 86400
T0 = 1_600_000_000


def ck(user="u", poi="p", ts=T0, lat=40.7, lon=-74.0, cat="Cafe"):
    return CheckIn(user, poi, lat, lon, ts, cat)


def block_of(events, index=1):
    events = sorted(events, key=lambda c: c.timestamp)
    return DataBlock(index, events, (events[0].timestamp, events[-1].timestamp))


# ---------------------------------------------------------------- io

def test_load_header_only(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("user_id,poi_id,lat,lon,timestamp,category\n")
    assert load_checkins(p) == []


def test_load_one_row(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("user_id,poi_id,lat,lon,timestamp,category\nu1,p9,40.5,-73.9,1600000000,Burger Joint\n")
    (c,) = load_checkins(p)
    assert c == CheckIn("u1", "p9", 40.5, -73.9, 1600000000, "Burger Joint")


def test_load_bad_latitude_names_line(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("user_id,poi_id,lat,lon,timestamp,category\nu,p,10,10,5,c\nu,p,91.0,10,6,c\n")
    with pytest.raises(DataError, match="line 3"):
        load_checkins(p)


def test_load_wrong_header_and_arity(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("a,b\n")
    with pytest.raises(DataError, match="header"):
        load_checkins(p)
    p.write_text("user_id,poi_id,lat,lon,timestamp,category\nu,p,1,2\n")
    with pytest.raises(DataError, match="line 2"):
        load_checkins(p)


def test_checkins_round_trip(tmp_path):
    rows = [ck("u1", "p1", T0 + 5, 40.123456789, -73.987654321, "A, with comma"), ck("u2", "p2", T0 + 1)]
    p = tmp_path / "c.csv"
    write_checkins(p, rows)
    assert load_checkins(p) == sorted(rows, key=lambda c: c.timestamp)


def test_category_map_round_trip(tmp_path):
    cmap = CategoryMap({"Burger Joint": "Food and Dining", "Food Truck": "Food and Dining"})
    p = tmp_path / "m.csv"
    write_category_map(p, cmap)
    assert load_category_map(p) == cmap


# ---------------------------------------------------------------- categories

def test_map_category():
    cmap = CategoryMap({"Burger Joint": "Food and Dining"})
    assert map_category("Burger Joint", cmap) == "Food and Dining"
    assert map_category("X", cmap) == "X"
    assert all(map_category(s, CategoryMap()) == s for s in ("a", "Bar", ""))


# ---------------------------------------------------------------- filtering

def test_filter_drops_light_user():
    rows = [ck("heavy", "p", T0 + i) for i in range(20)] + [ck("light", "p", T0 + 100 + i) for i in range(9)]
    out = filter_sparse(rows, 10)
    assert {c.user_id for c in out} == {"heavy"}


def test_filter_empty_and_shared_poi():
    assert filter_sparse([], 10) == []
    rows = [ck(f"u{u}", "shared", T0 + 100 * u + i) for u in range(3) for i in range(12)]
    assert filter_sparse(rows, 10) == rows


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), max_size=80), st.integers(1, 6))
def test_filter_survivors_meet_threshold_for_pois(pairs, k):
    rows = [ck(f"u{u}", f"p{p}", T0 + i) for i, (u, p) in enumerate(pairs)]
    out = filter_sparse(rows, k)
    users = {}
    for c in out:
        users[c.user_id] = users.get(c.user_id, 0) + 1
    assert all(n >= k for n in users.values())
    assert all(c in rows for c in out)


# ---------------------------------------------------------------- blocks

def _events(n):
    return [ck("u", "p", T0 + i) for i in range(n)]


def test_partition_100_into_5():
    base, blocks = partition_blocks(_events(100), 5)
    assert len(base) == 50 and [len(b) for b in blocks] == [10] * 5
    assert [b.index for b in blocks] == [1, 2, 3, 4, 5]


def test_partition_single_block():
    base, blocks = partition_blocks(_events(10), 1)
    assert len(base) == 5 and [len(b) for b in blocks] == [5]


def test_partition_remainder_to_last():
    base, blocks = partition_blocks(_events(106), 5)  # 53 base, 53 incremental
    assert len(base) == 53 and [len(b) for b in blocks] == [10, 10, 10, 10, 13]


@given(st.integers(10, 400), st.integers(1, 5))
def test_partition_is_ordered_cover(n, k):
    events = _events(n)
    base, blocks = partition_blocks(events, k)
    joined = base.checkins + [c for b in blocks for c in b.checkins]
    assert joined == events
    assert all(b.time_span[0] >= base.time_span[1] for b in blocks)


def test_partition_too_small():
    with pytest.raises(ConfigError):
        partition_blocks(_events(3), 5)


# ---------------------------------------------------------------- trajectories

def test_two_checkins_same_week():
    b = block_of([ck(ts=T0 + DAY), ck(ts=T0 + 3 * DAY)])
    (t,) = build_trajectories(b, WEEK)
    assert len(t) == 2


def test_singleton_week_dropped():
    b = block_of([ck("a", ts=T0), ck("b", ts=T0 + 1), ck("b", ts=T0 + 2)])
    trajs = build_trajectories(b, WEEK)
    assert [t.user_id for t in trajs] == ["b"]


def test_days_1_8_9():
    # anchor the block at day 0 with another user's visit so day 1 sits in week one
    anchor = [ck("z", ts=T0), ck("z", ts=T0 + 60)]
    b = block_of(anchor + [ck(ts=T0 + DAY), ck(ts=T0 + 8 * DAY), ck(ts=T0 + 9 * DAY)])
    trajs = [t for t in build_trajectories(b, WEEK) if t.user_id == "u"]
    assert len(trajs) == 1 and [r.timestamp for r in trajs[0].records] == [T0 + 8 * DAY, T0 + 9 * DAY]


def test_trajectory_contract():
    with pytest.raises(DataError):
        Trajectory("u", (ck(),))
    with pytest.raises(DataError):
        Trajectory("u", (ck(ts=T0 + 5), ck(ts=T0)))
    with pytest.raises(DataError):
        Trajectory("u", (ck("u"), ck("v", ts=T0 + 1)))


# ---------------------------------------------------------------- val/test split

def _trajs(n):
    return [Trajectory("u", (ck(ts=T0 + 10 * i), ck(ts=T0 + 10 * i + 1))) for i in range(n)]


def test_split_examples():
    val, test = split_val_test(_trajs(2), seed=9)
    assert len(val) == 1 and len(test) == 1
    val, test = split_val_test(_trajs(7), seed=1)
    assert (len(val), len(test)) == (4, 3)
    assert split_val_test(_trajs(7), 5) == split_val_test(_trajs(7), 5)


@given(st.integers(1, 60), st.integers(0, 2**31))
def test_split_partitions(n, seed):
    trajs = _trajs(n)
    val, test = split_val_test(trajs, seed)
    assert len(val) - len(test) in (0, 1)
    assert sorted(val + test, key=lambda t: t.end_time) == trajs


# ---------------------------------------------------------------- regions

def test_region_corners_and_midpoint():
    g = GridSpec(0.0, 10.0, 0.0, 10.0, rows=100, cols=100)
    assert assign_region(0.0, 0.0, g) == 0
    assert assign_region(10.0, 10.0, g) == 100 * 100 - 1
    assert assign_region(5.0, 5.0, GridSpec(0.0, 10.0, 0.0, 10.0, 2, 2)) == 3
    with pytest.raises(DataError):
        assign_region(11.0, 5.0, g)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 30), st.integers(1, 30))
def test_region_in_range(fy, fx, rows, cols):
    g = GridSpec(-5.0, 5.0, 100.0, 101.0, rows, cols)
    r = assign_region(-5.0 + 10.0 * fy, 100.0 + fx, g)
    assert 0 <= r < rows * cols


# ---------------------------------------------------------------- end to end

def test_prepare_on_synthetic(tiny_world):
    vocab, base, blocks = tiny_world["vocab"], tiny_world["base"], tiny_world["blocks"]
    assert len(blocks) == 5
    assert abs(len(base) - sum(len(b) for b in blocks)) <= 1
    for b in [base, *blocks]:
        for t in b.trajectories:
            assert len(t) >= 2
            assert np.all(vocab.poi_ids(t) < vocab.n_pois)


def test_prepare_from_path(tmp_path, tiny_world):
    p = tmp_path / "c.csv"
    write_checkins(p, tiny_world["checkins"])
    vocab, base, blocks = prepare(p, n_blocks=5, min_count=5)
    assert len(vocab.users) == len(tiny_world["vocab"].users)
