import datetime as dt
import io
from collections import Counter, deque

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import facts, timestamps, tkgs
from tkgqa.store import (
    Direction,
    EmptyTopics,
    Fact,
    Granularity,
    InvalidDate,
    MalformedTimestamp,
    ParseError,
    Step,
    TemporalPath,
    TemporalReasoningPath,
    Timestamp,
    Tkg,
    UnknownEntity,
    build_subgraph,
    compare_ts,
    in_window,
    load_tsv,
    parse_timestamp,
    strictly_after,
    strictly_before,
    validate_path,
    validate_trp,
)

T = parse_timestamp


# ---------------------------------------------------------------- timestamps

def test_parse_day_month_year():
    ts = T("2008-08-08")
    assert (ts.year, ts.month, ts.day, ts.granularity) == (2008, 8, 8, Granularity.DAY)
    assert T("2009").granularity is Granularity.YEAR
    assert T("2009-06").granularity is Granularity.MONTH


def test_parse_rejects_bad_input():
    with pytest.raises(InvalidDate):
        T("2009-02-30")
    with pytest.raises(MalformedTimestamp):
        T("09-02-2009")
    with pytest.raises(InvalidDate):
        T("2009-13")


def test_interval_bounds():
    assert T("2009").start == dt.date(2009, 1, 1)
    assert T("2009").end == dt.date(2009, 12, 31)
    assert T("2008-02").end == dt.date(2008, 2, 29)


def test_compare_examples():
    assert compare_ts(T("2009-02-10"), T("2009-07-18")) < 0
    assert compare_ts(T("2009"), T("2009-06-01")) < 0
    assert compare_ts(T("2012"), T("2012")) == 0


def test_strictly_before_examples():
    assert strictly_before(T("2009-11-15"), T("2010-06-26"))
    assert not strictly_before(T("2009"), T("2009-06-01"))
    assert not strictly_before(T("2008-08-08"), T("2008-08-08"))
    assert strictly_after(T("2010"), T("2009-12-31"))


def test_in_window_is_exclusive():
    assert not in_window(T("2008-08-08"), after=T("2008-08-08"))
    assert in_window(T("2008-08-09"), after=T("2008-08-08"), before=T("2008-08-10"))
    assert not in_window(T("2010-01-01"), before=T("2010"))


def test_coarsen_and_shift():
    assert T("2008-08-08").coarsen() == T("2008-08")
    assert T("2008-08").coarsen() == T("2008")
    assert T("2008").coarsen() == T("2008")
    assert T("2008-12").shift(1) == T("2009-01")
    assert T("2008-03-01").shift(-1) == T("2008-02-29")


@given(timestamps())
def test_format_parse_round_trip(ts):
    assert parse_timestamp(str(ts)) == ts
    assert ts.start <= ts.end


@given(timestamps(), timestamps(), timestamps())
def test_compare_is_total_order(a, b, c):
    assert compare_ts(a, b) == -compare_ts(b, a)
    assert (compare_ts(a, b) == 0) == (a == b)
    if compare_ts(a, b) <= 0 and compare_ts(b, c) <= 0:
        assert compare_ts(a, c) <= 0


@given(timestamps(), timestamps(), timestamps())
def test_strictly_before_transitive(a, b, c):
    if strictly_before(a, b) and strictly_before(b, c):
        assert strictly_before(a, c)
    assert not (strictly_before(a, b) and strictly_before(b, a))


# ---------------------------------------------------------------- loading

def test_fixture_loads(tkg):
    assert len(tkg) == 19
    assert "China" in tkg
    assert tkg.granularity_histogram() == {"Year": 0, "Month": 0, "Day": 19}


def test_load_empty_and_comments():
    assert len(load_tsv(b"")) == 0
    assert len(load_tsv(b"# just a comment\n\n")) == 0


def test_load_reports_line_number():
    with pytest.raises(ParseError) as err:
        load_tsv(b"a\tr\tb\t2009\nbad\tline\tonly\n")
    assert err.value.line == 2


def test_load_dedups():
    g = load_tsv(b"a\tr\tb\t2009\na\tr\tb\t2009\n")
    assert len(g) == 1


def test_index_holds_each_fact_once_per_endpoint(tkg):
    c = Counter()
    for e in tkg.entities:
        for f in tkg.incident(e):
            c[f] += 1
    for f in tkg.facts:
        assert c[f] == (1 if f.head == f.tail else 2)


@settings(max_examples=60, deadline=None)
@given(tkgs(max_entities=15, max_facts=40))
def test_index_consistent_with_fact_list(g):
    c = Counter()
    for e in g.entities:
        c.update(g.incident(e))
    assert set(c) == set(g.facts)
    assert sum(c.values()) == sum(1 if f.head == f.tail else 2 for f in g.facts)


# ---------------------------------------------------------------- neighbours and subgraphs

def test_neighbors_window(full_graph):
    got = full_graph.neighbors("Olympics 2008", Direction.OUT, T("2008-01-01"), T("2009-01-01"))
    assert [(f.relation, f.tail, str(f.ts)) for f in got] == [
        ("opening", "Beijing", "2008-08-08"), ("closing", "Beijing", "2008-08-24")]


def test_neighbors_in_matches_scan(tkg, full_graph):
    got = full_graph.neighbors("Beijing", "in")
    expected = sorted((f for f in tkg.facts if f.tail == "Beijing"), key=lambda f: (f.ts.start, f.head, f.relation))
    assert got == expected
    assert sum(f.relation == "visit" for f in got) == 3


def test_unknown_entity(full_graph):
    with pytest.raises(UnknownEntity):
        full_graph.neighbors("Atlantis")


def test_subgraph_hops(defs):
    assert "EU" in build_subgraph(defs, ["Merkel"], 3)
    g1 = build_subgraph(defs, ["Merkel"], 1)
    assert "Paris" in g1 and "Conference" not in g1
    with pytest.raises(EmptyTopics):
        build_subgraph(defs, ["Merkel"], 0)
    with pytest.raises(EmptyTopics):
        build_subgraph(defs, [], 2)


def bfs(g, topics, d_max):
    adj = {}
    for f in g.facts:
        adj.setdefault(f.head, set()).add(f.tail)
        adj.setdefault(f.tail, set()).add(f.head)
    dist = {t: 0 for t in topics}
    q = deque(topics)
    while q:
        v = q.popleft()
        for u in sorted(adj.get(v, ())):
            if u not in dist and dist[v] < d_max:
                dist[u] = dist[v] + 1
                q.append(u)
    return dist


@settings(max_examples=60, deadline=None)
@given(tkgs(max_entities=30, max_facts=60), st.integers(1, 3), st.data())
def test_subgraph_matches_bfs(g, d_max, data):
    topics = data.draw(st.lists(st.sampled_from(g.entities), min_size=1, max_size=3, unique=True))
    sub = build_subgraph(g, topics, d_max)
    assert sub.hops == bfs(g, topics, d_max)
    for f in sub.facts:
        assert f.head in sub.entities and f.tail in sub.entities


# ---------------------------------------------------------------- paths

def example1(defs):
    by = {(f.head, f.tail): f for f in defs.facts}
    return TemporalPath.of(by["Merkel", "Paris"], by["Paris", "Conference"], by["Conference", "EU"])


def example2(defs):
    by = {(f.head, f.tail): f for f in defs.facts}
    return TemporalReasoningPath((TemporalPath.of(by["Obama", "UN"]),
                                  TemporalPath.of(by["Beijing", "EU"], by["EU", "Paris"])))


def test_example1_path(defs):
    p = example1(defs)
    assert validate_path(p)
    assert len(p) == 3
    broken = list(p.facts)
    broken[1] = Fact(broken[1].head, broken[1].relation, broken[1].tail, T("2011"))
    assert not validate_path(TemporalPath.of(*broken))
    assert validate_path(TemporalPath.of(p.facts[0]))


def test_example2_trp(defs):
    trp = example2(defs)
    assert validate_trp(trp)
    assert not validate_trp(TemporalReasoningPath(trp.segments[::-1]))
    assert validate_trp(TemporalReasoningPath(()))


def test_reversed_step_connects():
    a = Fact("Obama", "visit", "Beijing", T("2009-11-15"))
    b = Fact("Beijing", "host", "Summit", T("2010"))
    p = TemporalPath((Step(b, True),))
    assert p.entities() == ["Summit", "Beijing"]
    assert validate_path(TemporalPath((Step(a), Step(b))))
    assert not validate_path(TemporalPath((Step(a, True), Step(b))))
