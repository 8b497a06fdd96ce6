import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DATA
from tkgqa.embedding import HashEmbedder, cosine
from tkgqa.memory import (
    INCORRECT,
    CorruptRecord,
    ExperiencePool,
    ExperienceRecord,
    buffer_score,
    load_cold_start,
    lookup_and_test,
)

TYPES = ["afterNfirst", "beforeNlast", "before", "after", "count"]


def rec(q, tau="afterNfirst", kind="TraceExp", ind="", **kw):
    return ExperienceRecord(kind, q, ind or q, tau, **kw)


def test_buffer_score_examples():
    assert buffer_score(1.0, 4, 4) == pytest.approx(1.0)
    assert buffer_score(0.0, 0, 0) == 0.0
    assert buffer_score(0.5, 2, 4) == pytest.approx(0.5)


def test_type_filter_and_cross_type():
    pool = ExperiencePool(cross_threshold=2.0)
    for i in range(3):
        pool.write_back(rec(f"first after event {i}", "afterNfirst"))
    for i in range(2):
        pool.write_back(rec(f"before event {i}", "before"))
    ex, _ = pool.retrieve("TraceExp", "first after", "", "afterNfirst")
    assert len(ex) == 3 and all(r.primary_type == "afterNfirst" for r in ex)
    pool.write_back(rec("last before x", "beforeNlast", secondary_types={"afterNfirst"}))
    ex, _ = pool.retrieve("TraceExp", "x", "", "afterNfirst")
    assert len(ex) == 4


def test_cross_type_augment():
    pool = ExperiencePool(cross_threshold=0.8)
    pool.write_back(rec("q1", "afterNfirst", ind="?y sign treaty China after t1"))
    r = rec("q2", "beforeNlast", ind="?y sign treaty China before t1")
    pool.write_back(r)
    assert "afterNfirst" in r.secondary_types
    far = rec("q3", "count", ind="UN hold summit")
    pool.write_back(far)
    assert far.secondary_types == set()
    assert ExperiencePool().cross_type_augment(rec("z")) == set()
    assert pool.cross_type_augment(far, 1.01) == set()


def test_incorrect_records_are_warnings_only():
    pool = ExperiencePool()
    pool.write_back(rec("good"))
    pool.write_back(rec("bad", outcome=INCORRECT, sufficient=False))
    ex, warn = pool.retrieve("TraceExp", "bad", "", "afterNfirst")
    assert [r.question_text for r in ex] == ["good"]
    assert [r.question_text for r in warn] == ["bad"]


def test_dedup_merges_hits():
    pool = ExperiencePool()
    a = pool.write_back(rec("same", hit_count=2))
    b = pool.write_back(rec("same", hit_count=3))
    assert a == b and len(pool) == 1 and pool.records[a].hit_count == 5


def test_eviction_keeps_capacity_and_drops_oldest_unused():
    pool = ExperiencePool(capacity=200)
    ids = [pool.write_back(rec(f"q{i}")) for i in range(201)]
    assert len(pool.buffer) == 200
    assert ids[0] not in pool.buffer and ids[-1] in pool.buffer
    assert len(pool) == 201  # archived, not deleted


def test_recent_hits_survive_eviction():
    pool = ExperiencePool(capacity=3)
    ids = [pool.write_back(rec(f"q{i}")) for i in range(3)]
    pool.retrieve("TraceExp", "q0", "q0", "afterNfirst", w_exp=1)
    pool.write_back(rec("q3"))
    assert ids[0] in pool.buffer and ids[1] not in pool.buffer


def simulate_adapt(records, rounds_used, decay, min_keep, floor, rounds):
    """Independent replay of the decay rule on plain dicts."""
    alive = set(records)
    for rnd in range(1, rounds + 1):
        for rid in sorted(alive):
            hits, last, created = records[rid]
            if rnd in rounds_used.get(rid, ()):
                hits += 1
                last = rnd
                records[rid] = (hits, last, created)
        drop = {rid for rid in alive
                if (1 + records[rid][0]) * decay ** (rnd - records[rid][1]) < floor and rnd - records[rid][2] >= min_keep}
        alive -= drop
    return alive


def test_adapt_matches_hand_simulation():
    pool = ExperiencePool()
    ids = [pool.write_back(rec(f"question number {i}", ind=f"ind{i}")) for i in range(10)]
    used = {ids[0]: {1, 2, 3, 4, 5, 6}, ids[3]: {2, 4, 6}, ids[7]: {6}}
    decay, min_keep, rounds = 0.7, 2, 8
    for rnd in range(1, rounds + 1):
        # usage in round r happens before that round's adaptation
        pool.round = rnd - 1
        for rid, rs in used.items():
            if rnd in rs:
                r = pool.records[rid]
                pool.round = rnd
                pool._touch(r)
                pool.round = rnd - 1
        pool.adapt(decay, min_keep)
    expect = simulate_adapt({i: (0, 0, 0) for i in ids}, used, decay, min_keep, 0.5, rounds)
    assert set(pool.buffer) == expect
    assert ids[0] in expect and ids[1] not in expect


def test_adapt_without_decay_prunes_nothing():
    pool = ExperiencePool()
    for i in range(5):
        pool.write_back(rec(f"q{i}"))
    assert sum(pool.adapt(1.0, 0) for _ in range(20)) == 0


def test_lookup_and_test():
    pool = ExperiencePool()
    assert lookup_and_test(pool, "q", "i", None, lambda q, r: True) == (None, None, False)
    pool.write_back(rec("q", payload={"answer": ["Japan"]}))
    assert lookup_and_test(pool, "q", "q", "afterNfirst", lambda q, r: True)[0] == ["Japan"]
    assert lookup_and_test(pool, "q", "q", "afterNfirst", lambda q, r: False) == (None, None, False)


def test_persist_round_trip():
    pool = ExperiencePool()
    for i, t in enumerate(TYPES):
        pool.write_back(rec(f"question {i} about {t}", t, hit_count=i))
    buf = io.StringIO()
    pool.persist(buf)
    back = ExperiencePool.load(io.StringIO(buf.getvalue()))
    for probe in ("question 1", "about count", "nothing"):
        for t in (None, "count"):
            a = [r.id for r in pool.retrieve("TraceExp", probe, "", t, bump=False)[0]]
            b = [r.id for r in back.retrieve("TraceExp", probe, "", t, bump=False)[0]]
            assert a == b


def test_corrupt_lines():
    with pytest.raises(CorruptRecord) as err:
        ExperiencePool.load(io.StringIO('{"schema_version": 1}\n{"kind": "TraceExp", "quest'))
    assert err.value.line == 2
    with pytest.raises(CorruptRecord):
        ExperiencePool.load(io.StringIO('{"kind": "Nope", "question_text": "x"}\n'))
    with pytest.raises(CorruptRecord):
        ExperiencePool.load(io.StringIO('{"schema_version": 99}\n'))


def test_cold_start_serves_classification():
    pool = ExperiencePool()
    lines = (DATA / "cold_start.jsonl").read_text().splitlines()
    ids = load_cold_start(pool, [json.loads(x) for x in lines if x.strip()])
    assert len(ids) == 5
    ex, _ = pool.retrieve("TypeExp", "After the election, which party first formed a coalition?", "")
    assert ex and ex[0].primary_type == "afterNfirst"


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(TYPES), st.integers(0, 30), st.booleans(), st.integers(0, 3)),
                min_size=1, max_size=40),
       st.sampled_from(TYPES), st.integers(1, 8))
def test_pool_invariants(specs, tau, cap):
    pool = ExperiencePool(capacity=cap)
    for i, (t, word, bad, hits) in enumerate(specs):
        pool.write_back(rec(f"w{word} {t}", t, hit_count=hits, outcome=INCORRECT if bad else "Verified"))
        assert len(pool.buffer) <= cap
    before = {i: r.hit_count for i, r in pool.records.items()}
    ex, warn = pool.retrieve("TraceExp", "w3", "", tau, w_exp=5)
    assert len(pool.buffer) <= cap
    assert all(tau in r.types() for r in ex + warn)
    assert all(r.outcome != INCORRECT for r in ex)
    assert all(r.outcome == INCORRECT for r in warn)
    assert all(pool.records[i].hit_count >= h for i, h in before.items())
