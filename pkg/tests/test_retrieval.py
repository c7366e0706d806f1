import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import linear_scan
from radar_ess.descriptor import EssDescriptor
from radar_ess.retrieval import DbConfig, DescriptorDb, ExclusionWindow, sidecar_path


def _desc(v, count, fid, sess="s"):
    return EssDescriptor(np.asarray(v, dtype=float), count, fid, sess)


def _random_db(rng, n, size=20, max_count=30, sparse=True):
    out = []
    for i in range(n):
        v = rng.integers(0, 6, size).astype(float)
        if sparse:
            v *= rng.random(size) < 0.5
        out.append(_desc(v, int(rng.integers(0, max_count + 1)), i))
    return out


def test_insert_into_empty_db():
    db = DescriptorDb(DbConfig(size=3))
    db.insert(_desc([1, 2, 3], 4, 0))
    assert len(db) == 1
    assert db.count_index == {4: [0]}


def test_hundred_singleton_buckets():
    db = DescriptorDb(DbConfig(size=4))
    db.extend(_desc([1, 0, 0, 0], c, c) for c in range(1, 101))
    assert len(db.count_index) == 100
    assert all(db.count_index[c] == [c - 1] for c in range(1, 101))


def test_count_index_covers_descriptors_exactly():
    db = DescriptorDb(DbConfig(size=20)).extend(_random_db(np.random.default_rng(1), 300))
    seen = sorted(i for ids in db.count_index.values() for i in ids)
    assert seen == list(range(len(db)))
    for count, ids in db.count_index.items():
        assert all(db.descriptors[i].cluster_count == count for i in ids)


def test_self_retrieval():
    rng = np.random.default_rng(2)
    items = [_desc(rng.random(20) + 0.01, int(rng.integers(0, 10)), i) for i in range(200)]
    db = DescriptorDb(DbConfig(size=20)).extend(items)
    for i, d in enumerate(items):
        res = db.query(d, verify_threshold=0.1)
        assert res.matched
        assert res.candidate_frame == ("s", i)
        assert res.distance == pytest.approx(0.0, abs=1e-12)


def test_insert_errors():
    db = DescriptorDb(DbConfig(size=3)).insert(_desc([1, 0, 0], 1, 7))
    with pytest.raises(ValueError):
        db.insert(_desc([1, 0], 1, 8))
    with pytest.raises(ValueError):
        db.insert(_desc([0, 1, 0], 2, 7))
    db.insert(_desc([0, 1, 0], 2, 7, "other"))
    assert len(db) == 2


def test_candidate_filter_examples():
    db = DescriptorDb(DbConfig(size=2)).extend(_desc([1, 1], c, i) for i, c in enumerate((3, 5, 9)))
    assert db.candidate_filter(5, 0) == [1]
    assert db.candidate_filter(5, 2) == [0, 1]
    assert db.candidate_filter(5, 100) == [0, 1, 2]
    with pytest.raises(ValueError):
        db.candidate_filter(5, -1)


@settings(max_examples=100, deadline=None)
@given(
    counts=st.lists(st.integers(0, 40), max_size=60),
    query_count=st.integers(0, 40),
    t1=st.integers(0, 50),
    t2=st.integers(0, 50),
)
def test_candidate_filter_sound_complete_monotone(counts, query_count, t1, t2):
    db = DescriptorDb(DbConfig(size=1)).extend(_desc([1.0], c, i) for i, c in enumerate(counts))
    lo, hi = sorted((t1, t2))
    small, big = db.candidate_filter(query_count, lo), db.candidate_filter(query_count, hi)
    assert small == [i for i, c in enumerate(counts) if abs(c - query_count) <= lo]
    assert set(small) <= set(big)


def test_query_identical_descriptor():
    db = DescriptorDb(DbConfig(size=3)).extend([_desc([1, 2, 3], 4, 0), _desc([3, 2, 1], 4, 1)])
    res = db.query(_desc([1, 2, 3], 4, 99, "q"), cluster_threshold=0, verify_threshold=0.1)
    assert res.matched and res.candidate_frame == ("s", 0)
    assert res.distance == pytest.approx(0.0, abs=1e-12)
    assert res.candidates_examined == 2


def test_query_outside_cluster_threshold():
    db = DescriptorDb(DbConfig(size=3)).extend([_desc([1, 2, 3], 4, 0), _desc([3, 2, 1], 6, 1)])
    res = db.query(_desc([1, 2, 3], 20, 99, "q"), cluster_threshold=10)
    assert not res.matched
    assert res.candidate_frame is None
    assert res.candidates_examined == 0


def test_query_empty_db():
    res = DescriptorDb(DbConfig(size=3)).query(_desc([1, 2, 3], 4, 0))
    assert (res.matched, res.candidates_examined, res.distance) == (False, 0, math.inf)


def test_query_dimension_mismatch():
    db = DescriptorDb(DbConfig(size=3)).insert(_desc([1, 2, 3], 1, 0))
    with pytest.raises(ValueError):
        db.query(_desc([1, 2], 1, 1))


def test_unverified_candidate_reported_but_not_matched():
    db = DescriptorDb(DbConfig(size=2)).insert(_desc([1, 0], 1, 0))
    res = db.query(_desc([1, 1], 1, 5, "q"), verify_threshold=0.2)
    assert not res.matched
    assert res.candidate_frame == ("s", 0)
    assert res.distance == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)


def test_ties_go_to_lowest_frame_id():
    db = DescriptorDb(DbConfig(size=2)).extend(
        [_desc([2, 2], 1, 9), _desc([1, 1], 3, 4), _desc([5, 5], 2, 6)]
    )
    res = db.query(_desc([1, 1], 2, 100, "q"), cluster_threshold=5)
    assert res.candidate_frame == ("s", 4)


def test_exclusion_window_hides_recent_frames():
    items = [_desc([1, 0, 0], 1, i) for i in range(0, 100, 5)]
    db = DescriptorDb(DbConfig(size=3)).extend(items)
    win = ExclusionWindow("s", 60, 50)
    res = db.query(_desc([1, 0, 0], 1, 60), exclusion=win)
    assert res.candidate_frame == ("s", 0)
    assert res.candidates_examined == sum(1 for d in items if d.frame_id <= 10)
    res = db.query(_desc([1, 0, 0], 1, 20), exclusion=ExclusionWindow("s", 20, 50))
    assert res.candidate_frame is None and res.candidates_examined == 0
    # other sessions are never hidden
    res = db.query(_desc([1, 0, 0], 1, 20, "q"), exclusion=ExclusionWindow("q", 20, 50))
    assert res.candidates_examined == len(items)


def test_zero_vectors_are_examined_but_never_returned():
    db = DescriptorDb(DbConfig(size=2)).extend([_desc([0, 0], 1, 0), _desc([1, 0], 1, 1)])
    res = db.query(_desc([1, 0], 1, 5, "q"))
    assert res.candidate_frame == ("s", 1) and res.candidates_examined == 2
    res = db.query(_desc([0, 0], 1, 5, "q"))
    assert res.candidate_frame is None and res.candidates_examined == 2


@pytest.mark.parametrize("gap", [0, 1, 10, 100])
def test_matches_linear_scan_oracle(gap):
    rng = np.random.default_rng(gap)
    items = _random_db(rng, 1000)
    db = DescriptorDb(DbConfig(size=20)).extend(items)
    for q in _random_db(rng, 60):
        q = EssDescriptor(q.v, q.cluster_count, 10_000 + q.frame_id, "q")
        idx, dist, examined = linear_scan(items, q, gap)
        res = db.query(q, cluster_threshold=gap)
        assert res.index == idx
        assert res.candidates_examined == examined <= len(db)
        if idx is not None:
            assert res.distance == pytest.approx(dist, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), gap=st.integers(0, 8), span=st.integers(0, 40))
def test_exclusion_matches_linear_scan_oracle(seed, gap, span):
    rng = np.random.default_rng(seed)
    # coarse integer vectors make exact cosine ties common
    items = _random_db(rng, 80, size=4, max_count=6)
    db = DescriptorDb(DbConfig(size=4)).extend(items)
    for i in rng.integers(0, 80, 5).tolist():
        q = items[i]
        win = ExclusionWindow("s", q.frame_id, span)
        idx, dist, examined = linear_scan(items, q, gap, win)
        res = db.query(q, cluster_threshold=gap, exclusion=win)
        assert (res.index, res.candidates_examined) == (idx, examined)


def test_save_load_round_trip(tmp_path):
    cfg = DbConfig(size=20, max_range=300.0, cluster_threshold=7, verify_threshold=0.15)
    items = _random_db(np.random.default_rng(3), 50)
    path = DescriptorDb(cfg).extend(items).save(tmp_path / "db.jsonl")
    assert sidecar_path(path).is_file()
    back = DescriptorDb.load(path)
    assert back.config == cfg
    assert len(back) == 50
    q = items[17]
    assert back.query(q).index == DescriptorDb(cfg).extend(items).query(q).index


def test_load_without_sidecar(tmp_path):
    path = DescriptorDb(DbConfig(size=5)).extend(_random_db(np.random.default_rng(4), 5, size=5)).save(
        tmp_path / "db.jsonl")
    sidecar_path(path).unlink()
    assert DescriptorDb.load(path).size == 5


def test_concurrent_queries_agree_with_serial():
    rng = np.random.default_rng(9)
    items = _random_db(rng, 2000)
    db = DescriptorDb(DbConfig(size=20)).extend(items)
    queries = [EssDescriptor(d.v, d.cluster_count, 10_000 + i, "q") for i, d in enumerate(_random_db(rng, 200))]
    with ThreadPoolExecutor(8) as pool:
        parallel = list(pool.map(lambda q: db.query(q).index, queries))
    fresh = DescriptorDb(DbConfig(size=20)).extend(items)
    assert parallel == [fresh.query(q).index for q in queries]


def test_inserts_after_query_invalidate_trees():
    db = DescriptorDb(DbConfig(size=2)).insert(_desc([1, 0], 1, 0))
    q = _desc([0, 1], 1, 9, "q")
    assert db.query(q).candidate_frame == ("s", 0)
    db.insert(_desc([0, 1], 1, 1))
    assert db.query(q).candidate_frame == ("s", 1)
