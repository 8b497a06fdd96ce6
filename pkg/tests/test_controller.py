import json
from importlib import resources

import jsonschema
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import case_questions, make_engine, timestamps
from tkgqa.controller import (
    IncoherentChain,
    NoTopicEntities,
    PhaseError,
    Trajectory,
    normalize_answer,
    widen,
    widen_constraint,
)
from tkgqa.reasoner import Reasoner, ScriptedBackend
from tkgqa.retrieval import SELECTION_OPS, Constraint
from tkgqa.store import Fact, TemporalPath, parse_timestamp
from tkgqa.toolkits import ToolkitCall, execute

T = parse_timestamp
CASES = {q["id"]: q for q in case_questions()}
SCHEMA = json.loads((resources.files("tkgqa") / "data" / "trace.schema.json").read_text())

EXPECTED = {
    "case_after_first": (["Japan"], {"t1": "2008-08-08", "t2": "2009-02-10"}),
    "case_before_last": (["Barack Obama"], {"t1": "2010-06-26", "t2": "2009-11-15"}),
    "case_between": (["NVIDIA", "OpenAI"], {"t1": "2015-09-10", "t2": "2018-11-22", "t3": "2016-05-20"}),
    "case_count": (["4"], {"t1": "2009-12-07"}),
}


class Adversarial:
    """Scripted replies except every sufficiency check fails with a fixed action."""

    repairable = False

    def __init__(self, action):
        self.inner = ScriptedBackend.load()
        self.action = action

    def complete(self, role, prompt, inputs):
        if role == "check_sufficiency":
            return json.dumps({"sufficient": False, "action": self.action})
        return self.inner.complete(role, prompt, inputs)


@pytest.fixture(scope="module")
def runs():
    eng = make_engine()
    first = {k: eng.answer_question(q["question"]) for k, q in CASES.items()}
    again = {k: eng.answer_question(q["question"]) for k, q in CASES.items()}
    return eng, first, again


def test_ground_after_first():
    eng = make_engine()
    g = eng.ground(CASES["case_after_first"]["question"], eng.reasoner.fork())
    assert g.tau == "afterNfirst"
    assert {"China", "Olympics 2008"} <= set(g.topics)
    assert len(g.tree) == 2 and g.tree.time_vars == ("t1", "t2")
    assert "China" in g.subgraph


@pytest.mark.parametrize("qid", sorted(EXPECTED))
def test_case_answers_and_bindings(runs, qid):
    _, first, _ = runs
    res = first[qid]
    answer, bindings = EXPECTED[qid]
    assert res.answer.entities == answer
    assert res.sufficient
    assert {k: str(v) for k, v in res.trajectory.bindings.items()} == bindings
    assert all(n.status == "Solved" for n in res.trajectory.nodes)


def test_repeat_reuses_traces(runs):
    _, first, again = runs
    for qid in CASES:
        a, b = first[qid], again[qid]
        assert b.answer.entities == a.answer.entities
        assert all(n.memory_hit and not n.attempts for n in b.trajectory.nodes)
        assert b.trace["reasoner_total"] < a.trace["reasoner_total"]
        assert "select_toolkits" not in b.trace["reasoner_calls"]


def test_bindings_satisfy_tree_constraints(runs):
    _, first, _ = runs
    for res in first.values():
        b = res.trajectory.bindings
        for c in res.grounding.tree.constraints:
            if c.op in SELECTION_OPS or c.var not in b:
                continue
            sub = c.substitute(b)
            if sub.concrete:
                assert sub.holds(b[c.var]), (c, b)


def test_unknown_entity_leaves_pool_alone():
    eng = make_engine()
    before = len(eng.pool)
    with pytest.raises(PhaseError) as info:
        eng.answer_question("Who founded Atlantis?")
    assert info.value.phase == "grounding" and isinstance(info.value.cause, NoTopicEntities)
    assert len(eng.pool) == before


def test_violated_binding_is_incoherent():
    eng = make_engine()
    r = eng.reasoner.fork()
    g = eng.ground(CASES["case_after_first"]["question"], r)
    traj = Trajectory(bindings={"t1": T("2010-01-01"), "t2": T("2009-01-01")})
    with pytest.raises(IncoherentChain):
        eng.synthesize(g, traj, r)


def test_overlapping_proof_paths_are_incoherent():
    eng = make_engine()
    r = eng.reasoner.fork()
    g = eng.ground(CASES["case_after_first"]["question"], r)
    a, b = (g.tree.nodes[i] for i in g.tree.order)
    # node a's evidence ends in 2011, node b's starts in 2010
    a.status, a.proof_paths = "Solved", [TemporalPath.of(Fact("X", "r", "Y", T("2009")), Fact("Y", "r", "Z", T("2011")))]
    b.status, b.proof_paths = "Solved", [TemporalPath.of(Fact("P", "r", "Q", T("2010")))]
    with pytest.raises(IncoherentChain):
        eng.synthesize(g, Trajectory(), r)


@pytest.mark.parametrize("action", ["Decompose", "RetrieveAgain", "Refine"])
def test_budget_ends_repair_loop(action):
    eng = make_engine(memory=False, reasoner=Reasoner(Adversarial(action)))
    res = eng.answer_question(CASES["case_after_first"]["question"])
    rcfg = eng.cfg.retrieval
    attempts = sum(len(n.attempts) for n in res.trajectory.nodes)
    assert attempts <= len(res.trajectory.nodes) + rcfg.d_max - 1
    assert not res.sufficient
    assert all(n.status == "Failed" for n in res.trajectory.nodes)


def test_decompose_past_depth_fails_node():
    eng = make_engine(memory=False, reasoner=Reasoner(Adversarial("Decompose")))
    eng.cfg.retrieval.d_max = 2
    res = eng.answer_question(CASES["case_count"]["question"])
    recs = res.trajectory.nodes
    assert recs[0].status == "Failed"
    assert any(r.error and r.error.startswith("BudgetExhausted") for r in recs) or \
        sum(len(r.attempts) for r in recs) <= len(recs) + 1


def test_retrieve_again_widens_window():
    eng = make_engine(memory=False, reasoner=Reasoner(Adversarial("RetrieveAgain")))
    res = eng.answer_question(CASES["case_after_first"]["question"])
    node = next(n for n in res.trajectory.nodes if len(n.attempts) > 1)
    first, second = node.attempts[0], node.attempts[1]
    assert second["action"] == "RetrieveAgain"
    assert second["beam"] == 2 * first["beam"]


def test_widen_examples():
    # coarsen one level, then step one period outward
    assert str(widen(T("2009-02-10"), -1)) == "2009-01"
    assert str(widen(T("2009-02"), 1)) == "2010"
    assert str(widen(T("2009-02-10"), 0)) == "2009-02"
    assert str(widen(T("2009"), -1)) == "2008"
    assert widen_constraint(Constraint("after", "t", T("2009"))) == Constraint("after", "t", T("2008"))
    assert widen_constraint(Constraint("same_month", "t", T("2009-02"))).op == "same_year"


@settings(max_examples=300)
@given(st.sampled_from(["after", "before", "between", "equal", "same_month", "same_year"]),
       timestamps(2000, 2010), timestamps(2011, 2020), timestamps(1995, 2025))
def test_widening_never_drops_a_match(op, a, b, x):
    c = Constraint(op, "t", a, b) if op == "between" else Constraint(op, "t", a)
    if c.holds(x):
        assert widen_constraint(c).holds(x)


def test_trace_replays(runs):
    eng, first, _ = runs
    for res in first.values():
        g = res.grounding.subgraph
        for node in res.trace["nodes"]:
            for att in node["attempts"]:
                for logged in att.get("results", []):
                    if "error" in logged:
                        continue
                    call = ToolkitCall.from_dict(logged["call"])
                    assert execute(g, call, eng.cfg.retrieval.result_cap).to_dict() == logged


def test_traces_match_schema(runs):
    _, first, again = runs
    for res in list(first.values()) + list(again.values()):
        jsonschema.validate(json.loads(json.dumps(res.trace)), SCHEMA)


def test_ablations_change_trace():
    q = CASES["case_after_first"]["question"]
    flat = make_engine(use_tree=False).answer_question(q)
    assert len(flat.trace["tree"]["nodes"]) == 1 and flat.trace["flags"]["tree"] is False
    nomem = make_engine(memory=False)
    assert nomem.pool is None
    assert nomem.answer_question(q).trace["flags"]["memory"] is False
    for flag in ("use_graph", "use_dense"):
        res = make_engine(**{flag: False}).answer_question(q)
        streams = [s for n in res.trace["nodes"] for a in n["attempts"] for s in a["streams"]]
        assert streams
        key = "graph" if flag == "use_graph" else "dense"
        assert all(not s.get(key) for s in streams), streams


def test_normalize_answer():
    assert normalize_answer("  Barack_Obama ") == "barack obama"
    assert normalize_answer("NVIDIA") == normalize_answer("nvidia")
