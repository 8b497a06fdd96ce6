"""Question-level orchestration.

A question is grounded (mentions, linked topics, subgraph, temporal type,
decomposition tree), its nodes are solved in tree order with memory reuse
and bounded repair, and the solved steps are merged into one time-ordered
chain from which the final answer is read. Every run yields a trace dict.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

from .config import Config
from .embedding import EntityLinker, HashEmbedder, cosine, verbalize
from .memory import INCORRECT, VERIFIED, ExperiencePool, ExperienceRecord, lookup_and_test
from .reasoner import (
    Answer,
    NoValidSeed,
    QuestionTree,
    Reasoner,
    SchemaError,
    TreeError,
    TreeNode,
    Verdict,
    collapse_tree,
    parse_decomposition,
)
from .retrieval import SELECTION_OPS, Constraint, Indicator, RetrievalConfig, hybrid_retrieve
from .store import (
    Fact,
    Granularity,
    Step,
    Subgraph,
    TemporalPath,
    TemporalReasoningPath,
    Timestamp,
    Tkg,
    build_subgraph,
    parse_timestamp,
    validate_path,
    validate_trp,
)
from .toolkits import (
    ToolkitCall,
    ToolkitError,
    ToolkitResult,
    execute,
    normalize_params,
    relation_matches,
    window_predicate,
)

TRACE_SCHEMA_VERSION = 1
FIRST_TYPES = ("first", "afterNfirst")
LAST_TYPES = ("last", "beforeNlast")


class ControllerError(Exception):
    pass


class NoTopicEntities(ControllerError):
    pass


class BudgetExhausted(ControllerError):
    pass


class IncoherentChain(ControllerError):
    pass


class GlobalInsufficient(ControllerError):
    pass


class PhaseError(ControllerError):
    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


# ---------------------------------------------------------------- records


@dataclass
class Grounding:
    question: str
    mentions: list[str]
    links: list[tuple[str, str, float]]
    topics: list[str]
    tau: str
    subgraph: Subgraph
    tree: QuestionTree

    def to_dict(self) -> dict:
        return {"question": self.question, "mentions": list(self.mentions),
                "links": [{"mention": m, "entity": e, "score": round(s, 6)} for m, e, s in self.links],
                "topics": list(self.topics), "type": self.tau,
                "subgraph": {"entities": len(self.subgraph.entities), "facts": len(self.subgraph)}}


@dataclass
class NodeAnswer:
    entities: list[str] = field(default_factory=list)
    time: Timestamp | None = None
    paths: list[TemporalPath] = field(default_factory=list)
    count: int | None = None

    def to_dict(self) -> dict:
        return {"entities": list(self.entities), "time": None if self.time is None else str(self.time),
                "count": self.count, "paths": [str(p) for p in self.paths]}


@dataclass
class NodeRecord:
    node_id: int
    subquestion: str
    indicator: str
    tau: str
    constraints: list[str]
    required: bool
    memory_hit: bool = False
    seeds: list[str] = field(default_factory=list)
    attempts: list[dict] = field(default_factory=list)
    verdict: dict | None = None
    status: str = "Pending"
    answer: NodeAnswer = field(default_factory=NodeAnswer)
    error: str | None = None

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "subquestion": self.subquestion, "indicator": self.indicator,
                "tau": self.tau, "constraints": list(self.constraints), "required": self.required,
                "memory_hit": self.memory_hit, "seeds": list(self.seeds), "attempts": list(self.attempts),
                "verdict": self.verdict, "status": self.status, "answer": self.answer.to_dict(), "error": self.error}


@dataclass
class Trajectory:
    nodes: list[NodeRecord] = field(default_factory=list)
    chain: TemporalReasoningPath = field(default_factory=TemporalReasoningPath)
    answer: Answer | None = None
    sufficient: bool = False
    bindings: dict[str, Timestamp] = field(default_factory=dict)


@dataclass
class QAResult:
    answer: Answer
    sufficient: bool
    trace: dict
    trajectory: Trajectory
    grounding: Grounding


# ---------------------------------------------------------------- helpers


def path_to_json(p: TemporalPath) -> list[dict]:
    return [{"head": s.fact.head, "relation": s.fact.relation, "tail": s.fact.tail, "ts": str(s.fact.ts),
             "reversed": s.reversed} for s in p.steps]


def path_from_json(steps: list[dict]) -> TemporalPath:
    return TemporalPath(tuple(
        Step(Fact(s["head"], s["relation"], s["tail"], parse_timestamp(s["ts"])), bool(s.get("reversed")))
        for s in steps))


def answer_entity(p: TemporalPath, concrete: str | None) -> str:
    if len(p) == 1 and concrete is not None:
        f = p.steps[0].fact
        if concrete in (f.head, f.tail):
            return f.other(concrete)
    return p.steps[-1].dst


def path_matches(p: TemporalPath, ind: Indicator, aliases) -> bool:
    if not any(relation_matches(ind.relation_text, s.fact.relation, aliases) for s in p.steps):
        return False
    c = ind.concrete_entity
    return c is None or c in p.entities()


def widen(ts: Timestamp, direction: int) -> Timestamp:
    """One period coarser, moved one period outward (-1 earlier, +1 later, 0 stays)."""
    w = ts.coarsen() if ts.granularity is not Granularity.YEAR else ts
    return w.shift(direction) if direction else w


def widen_constraint(c: Constraint) -> Constraint:
    if not c.concrete or c.op in SELECTION_OPS:
        return c
    if c.op == "after":
        return dataclasses.replace(c, anchor=widen(c.anchor, -1))
    if c.op == "before":
        return dataclasses.replace(c, anchor=widen(c.anchor, +1))
    if c.op == "between":
        return dataclasses.replace(c, anchor=widen(c.anchor, -1), bound2=widen(c.bound2, +1))
    if c.op == "equal":
        return dataclasses.replace(c, anchor=widen(c.anchor, 0))
    if c.op == "same_month":
        return dataclasses.replace(c, op="same_year")
    return c


def scoped_facts(g: Subgraph, call: ToolkitCall) -> list[Fact]:
    """Facts a call could have returned, ignoring its limit and relation filter."""
    p = normalize_params(call.params)
    pred = window_predicate(call)
    ent = p.get("entity")
    base = g.incident(ent) if ent is not None and ent in g else g.facts
    return [f for f in base if pred(f.ts)]


def normalize_answer(s: str) -> str:
    return " ".join(str(s).strip().lower().replace("_", " ").split())


# ---------------------------------------------------------------- engine


class Engine:
    def __init__(self, tkg: Tkg, cfg: Config | None = None, reasoner: Reasoner | None = None,
                 pool: ExperiencePool | None = None, embedder=None):
        from .reasoner import ScriptedBackend
        self.tkg = tkg
        self.cfg = cfg or Config()
        self.embedder = embedder or HashEmbedder()
        self.reasoner = reasoner or Reasoner(ScriptedBackend.load())
        self.pool = pool if self.cfg.memory.enabled else None
        self.linker = EntityLinker(tkg, self.embedder, self.cfg.link_threshold)
        self._facts = set(tkg.facts)

    # -------------------------------------------------------- grounding

    def _resolve(self, name: str) -> str:
        if name in self.tkg:
            return name
        hits = self.linker.link([name])
        return hits[0][1] if hits else name

    def _exemplars(self, kind: str, q: str, ind: str = "", tau: str | None = None):
        if self.pool is None:
            return [], []
        return self.pool.retrieve(kind, q, ind, tau, self.cfg.memory.w_exp)

    def ground(self, question: str, r: Reasoner) -> Grounding:
        mentions = r.extract_entities(question)
        names = [m for m in mentions if not _is_date(m)]
        links = self.linker.link(names)
        topics = list(dict.fromkeys(e for _, e, _ in links))
        if not topics:
            raise NoTopicEntities(f"no entity in the graph matches {names!r}")

        type_ex, type_warn = self._exemplars("TypeExp", question)
        tau = next((x.primary_type for x in type_ex if x.question_text == question and x.primary_type), None)
        if tau is None:
            tau = r.classify_type(question, type_ex, type_warn)

        d_max = self.cfg.retrieval.d_max
        decomp_ex, _ = self._exemplars("DecompExp", question, "", tau)
        reuse = next((x for x in decomp_ex if x.question_text == question and x.payload.get("plan")), None)
        if reuse is not None:
            tree = parse_decomposition(reuse.payload["plan"], tau, d_max, self._resolve)
        else:
            tree = r.decompose(question, tau, decomp_ex, topics, d_max, self._resolve)
        if not self.cfg.use_tree:
            tree = collapse_tree(tree, question, tau)

        for node in tree:
            for e in node.indicator.entities:
                if e in self.tkg and e not in topics:
                    topics.append(e)
        g = build_subgraph(self.tkg, topics, d_max)
        return Grounding(question, mentions, links, topics, tau, g, tree)

    # -------------------------------------------------------- node solving

    def _extract(self, ind: Indicator, selected: Sequence[TemporalPath], result: ToolkitResult,
                 g: Subgraph) -> NodeAnswer:
        """Read an answer off the selected paths under the node's temporal type."""
        if ind.tau == "count":
            if result.count is not None:
                facts = result.facts
            else:
                facts = [f for f in result.facts if relation_matches(ind.relation_text, f.relation, g.aliases)
                         and all(c.holds(f.ts) for c in ind.constraints)]
            paths = [TemporalPath((s,)) for s in result.steps if s.fact in set(facts)]
            return NodeAnswer([str(len(facts))], None, paths, len(facts))
        matching = [p for p in selected if path_matches(p, ind, g.aliases)]
        if not matching:
            return NodeAnswer()
        if ind.tau in FIRST_TYPES:
            t0 = min(p.last_ts.start for p in matching)
            winners = [p for p in matching if p.last_ts.start == t0]
        elif ind.tau in LAST_TYPES:
            t0 = max(p.last_ts.start for p in matching)
            winners = [p for p in matching if p.last_ts.start == t0]
        else:
            winners = sorted(matching, key=lambda p: (p.last_ts.key(), p.key()))
        ents = list(dict.fromkeys(answer_entity(p, ind.concrete_entity) for p in winners))
        return NodeAnswer(ents, winners[0].last_ts, winners, None)

    def _attempt(self, node: TreeNode, ind: Indicator, grounding: Grounding, r: Reasoner,
                 rcfg: RetrievalConfig, rec: NodeRecord) -> tuple[NodeAnswer, Verdict, dict]:
        g = grounding.subgraph
        log: dict[str, Any] = {"indicator": ind.verbalize(), "beam": rcfg.beam}
        seed_ex, _ = self._exemplars("SeedExp", node.subquestion, ind.verbalize(), grounding.tau)
        allowed = [t for t in grounding.topics if t in g]
        seeds = r.select_seeds(allowed, ind, node.subquestion, seed_ex, allowed=allowed + [
            e for e in ind.entities if e in g])
        rec.seeds = seeds
        tool_ex, _ = self._exemplars("ToolkitExp", node.subquestion, ind.verbalize(), grounding.tau)
        calls = r.select_toolkits(ind, node.subquestion, ind.tau, seeds, tool_ex)
        entity_tools = {"OneHop", "AfterFirst", "BeforeLast", "BetweenRange", "DirectConnection", "Timeline",
                        "Before", "After", "FirstLast", "Count"}
        calls = [c if "entity" in c.params or c.name not in entity_tools else c.with_params(entity=seeds[0])
                 for c in calls]
        log["calls"] = [c.to_dict() for c in calls]
        log["results"], log["streams"], log["candidates"], log["selected"] = [], [], [], []
        candidates, answers = [], []
        for i, call in enumerate(sorted(calls, key=lambda c: c.priority)):
            try:
                res = execute(g, call, rcfg.result_cap)
            except (ToolkitError, KeyError, ValueError) as exc:
                log["results"].append({"call": call.to_dict(), "error": f"{type(exc).__name__}: {exc}"})
                continue
            log["results"].append(res.to_dict())

            def first_hop(seed, res=res):
                return [Step(f, f.tail == seed and f.head != seed) for f in res.facts if seed in (f.head, f.tail)]

            ranked, stats = hybrid_retrieve(
                g, seeds, ind, rcfg, self.embedder, doc_facts=scoped_facts(g, call),
                first_hop=first_hop, use_graph=self.cfg.use_graph, use_dense=self.cfg.use_dense)
            log["streams"].append(stats)
            log["candidates"].append([s.to_dict() for s in ranked[:5]])
            selected = r.select_paths(ranked, node.subquestion, ind, rcfg.w_max) if ranked else []
            log["selected"].append([str(p) for p in selected])
            ans = self._extract(ind, selected, res, g)
            valid = bool(ans.paths) and all(validate_path(p) for p in ans.paths) and all(
                c.holds(p.last_ts) for p in ans.paths for c in ind.constraints)
            answers.append(ans)
            limit = normalize_params(call.params).get("limit")
            candidates.append({"toolkit": call.name, "priority": call.priority, "entities": ans.entities,
                               "time": None if ans.time is None else str(ans.time),
                               "path": [str(p) for p in ans.paths[:1]], "valid": valid,
                               "n_results": len(res), "limit": limit})
        if not answers:
            ans = NodeAnswer()
        elif len(answers) == 1:
            ans = answers[0]
        else:
            win = r.debate_vote(node.subquestion, candidates, ind.tau)
            ans = answers[win.index]
            log["vote"] = win.to_dict()
        verdict = r.check_sufficiency("Local", node.subquestion, ans.entities, ans.paths, ind.constraints)
        log["answer"] = ans.to_dict()
        log["verdict"] = verdict.to_dict()
        return ans, verdict, log

    def _from_memory(self, node: TreeNode, ind: Indicator, grounding: Grounding) -> NodeAnswer | None:
        if self.pool is None:
            return None
        ind_text = ind.verbalize()
        ind_vec = self.embedder.embed(ind_text)
        resolved: dict[int, NodeAnswer] = {}

        def sufficient(q, rec: ExperienceRecord) -> bool:
            p = rec.payload
            if p.get("scope") != "node":
                return False
            if cosine(ind_vec, self.embedder.embed(rec.indicator_text)) < self.cfg.memory.reuse_threshold:
                return False
            try:
                paths = [path_from_json(x) for x in p.get("paths", [])]
            except (KeyError, ValueError):
                return False
            if not paths:
                return False
            for path in paths:
                if any(f not in self._facts for f in path.facts) or not validate_path(path):
                    return False
                if not all(c.holds(path.last_ts) for c in ind.constraints):
                    return False
                if ind.concrete_entity is not None and ind.concrete_entity not in path.entities():
                    return False
            t = p.get("time")
            resolved[rec.id] = NodeAnswer(list(p.get("answer") or []), parse_timestamp(t) if t else None, paths,
                                          p.get("count"))
            return True

        _, payload, ok = lookup_and_test(self.pool, node.subquestion, ind_text, ind.tau, sufficient,
                                         self.cfg.memory.w_exp)
        if not ok:
            return None
        return next(a for a in resolved.values() if a.entities == list(payload.get("answer") or []))

    def _bind(self, node: TreeNode, ans: NodeAnswer, traj: Trajectory, entity_bindings: dict[str, str]) -> None:
        ind = node.indicator
        tv = ind.time_var
        if tv and tv not in traj.bindings and ans.paths and ans.count is None:
            times = [p.last_ts for p in ans.paths]
            if ind.tau in FIRST_TYPES:
                traj.bindings[tv] = min(times)
            elif ind.tau in LAST_TYPES:
                traj.bindings[tv] = max(times)
            else:
                traj.bindings[tv] = ans.time or times[0]
        for var in (ind.subject, ind.object):
            if var.startswith("?") and var not in entity_bindings and ans.entities and ans.count is None:
                entity_bindings[var] = ans.entities[0]

    def _write_node(self, node: TreeNode, ind: Indicator, ans: NodeAnswer, rec: NodeRecord, tau: str,
                    calls: list[dict]) -> int:
        if self.pool is None:
            return 0
        text = ind.verbalize()
        payload = {"scope": "node", "answer": ans.entities, "time": None if ans.time is None else str(ans.time),
                   "count": ans.count, "paths": [path_to_json(p) for p in ans.paths]}
        self.pool.write_back(ExperienceRecord("TraceExp", node.subquestion, text, ind.tau, payload=payload))
        self.pool.write_back(ExperienceRecord("ToolkitExp", node.subquestion, text, tau, payload={"calls": calls}))
        self.pool.write_back(ExperienceRecord("SeedExp", node.subquestion, text, tau, payload={"seeds": rec.seeds}))
        return 3

    def run_node(self, node: TreeNode, grounding: Grounding, traj: Trajectory, r: Reasoner, budget: dict,
                 required: bool, entity_bindings: dict[str, str]) -> NodeRecord:
        tree = grounding.tree
        ind = node.indicator.substitute(traj.bindings, entity_bindings)
        rec = NodeRecord(node.id, node.subquestion, ind.template(), ind.tau, [str(c) for c in ind.constraints],
                         required)
        mem = self._from_memory(node, ind, grounding)
        if mem is not None:
            rec.memory_hit = True
            rec.status = node.status = "Solved"
            rec.answer = node.answer = mem
            node.proof_paths = list(mem.paths)
            rec.verdict = {"sufficient": True, "action": "Accept", "note": "reused stored trace"}
            self._bind(node, mem, traj, entity_bindings)
            return rec

        rcfg = self.cfg.retrieval
        subq = node.subquestion
        ans, verdict, log = NodeAnswer(), Verdict(False, "RetrieveAgain"), {}
        cur = node
        while True:
            try:
                ans, verdict, log = self._attempt(cur, ind, grounding, r, rcfg, rec)
            except (NoValidSeed, SchemaError, ToolkitError, KeyError) as exc:
                rec.error = f"{type(exc).__name__}: {exc}"
                ans, verdict, log = NodeAnswer(), Verdict(False, "Refine", rec.error), {"error": rec.error}
            log["action"] = "initial" if not rec.attempts else rec.attempts[-1].get("next")
            rec.attempts.append(log)
            if verdict.sufficient:
                break
            d_max, b_max = rcfg.d_max, rcfg.b_max
            if not (budget["D"] < d_max and budget["B"] < b_max):
                break
            action = verdict.action
            log["next"] = action
            if action == "RetrieveAgain":
                ind = dataclasses.replace(ind, constraints=tuple(widen_constraint(c) for c in ind.constraints))
                beam = None if rcfg.beam is None else rcfg.beam * 2
                rcfg = dataclasses.replace(rcfg, beam=beam)
                new = 1
            elif action == "Refine":
                subq, ind = r.refine(subq, ind)
                cur = dataclasses.replace(cur, subquestion=subq)
                new = 1
            else:  # Decompose
                try:
                    child_ind = dataclasses.replace(ind, d_pred=ind.d_pred + 1)
                    cur = tree.add_child(node, subq, child_ind, rcfg.d_max)
                except TreeError as exc:
                    rec.error = f"BudgetExhausted: {exc}"
                    break
                ind = child_ind
                new = 1
            budget["D"] += 1
            budget["B"] += new - 1

        rec.verdict = verdict.to_dict()
        if verdict.sufficient:
            rec.status = node.status = "Solved"
            rec.answer = node.answer = ans
            node.proof_paths = list(ans.paths)
            if cur is not node:
                cur.status, cur.answer, cur.proof_paths = "Solved", ans, list(ans.paths)
            node.indicator = dataclasses.replace(node.indicator, relation_text=ind.relation_text) \
                if ind.relation_text != node.indicator.relation_text else node.indicator
            self._bind(node, ans, traj, entity_bindings)
            self._write_node(cur, ind, ans, rec, grounding.tau, log.get("calls", []))
        else:
            rec.status = node.status = "Failed"
            if cur is not node:
                cur.status = "Failed"
        return rec

    # -------------------------------------------------------- synthesis

    def synthesize(self, grounding: Grounding, traj: Trajectory, r: Reasoner) -> Answer:
        tree = grounding.tree
        order = {nid: i for i, nid in enumerate(tree.order)}
        solved = [n for n in tree if n.status == "Solved" and n.parent is None or
                  n.status == "Solved" and n.proof_paths]
        tagged = []
        for n in solved:
            for p in n.proof_paths:
                tagged.append((p.first_ts.start, order[n.id], p.key(), p))
        tagged.sort(key=lambda t: t[:3])
        segs = []
        for t in tagged:
            if t[3].key() not in {s.key() for s in segs}:
                segs.append(t[3])
        traj.chain = TemporalReasoningPath(tuple(segs))
        if not validate_trp(traj.chain):
            raise IncoherentChain("merged evidence is not time-monotone")
        for c in tree.constraints:
            if c.op in SELECTION_OPS or c.var not in traj.bindings:
                continue
            sub = c.substitute(traj.bindings)
            if sub.concrete and not sub.holds(traj.bindings[c.var]):
                raise IncoherentChain(f"{c} violated by {c.var} = {traj.bindings[c.var]}")

        records = {rec.node_id: rec for rec in traj.nodes}
        summary = [{"node": rec.node_id, "subquestion": rec.subquestion, "status": rec.status,
                    "required": rec.required, "answer": rec.answer.entities,
                    "time": None if rec.answer.time is None else str(rec.answer.time)} for rec in traj.nodes]
        last = next((tree.nodes[nid] for nid in reversed(tree.order)
                     if nid in records and records[nid].status == "Solved"), None)
        default = Answer([], None, "", [])
        if last is not None:
            a = records[last.id].answer
            default = Answer(list(a.entities), None if a.time is None else str(a.time),
                             f"read from step {last.id}: {last.subquestion}", [str(p) for p in a.paths])
        verdict = r.check_sufficiency("Global", grounding.question, default.entities, list(segs), tree.constraints,
                                      summary)
        traj.sufficient = verdict.sufficient
        evidence = {e for p in segs for e in p.entities()}
        ind = (last or tree.nodes[tree.order[-1]]).indicator
        ans_ex, _ = self._exemplars("TraceExp", grounding.question, ind.verbalize(), grounding.tau)
        answer = r.generate_answer(grounding.question, ind, summary, default, evidence,
                                   [x for x in ans_ex if x.payload.get("scope") == "question"])
        traj.answer = answer
        return answer

    def _write_question(self, grounding: Grounding, traj: Trajectory) -> None:
        if self.pool is None:
            return
        q, tau, tree = grounding.question, grounding.tau, grounding.tree
        last_ind = tree.nodes[tree.order[-1]].indicator.verbalize()
        payload = {"scope": "question", "answer": traj.answer.entities if traj.answer else [],
                   "chain": [str(p) for p in traj.chain.segments]}
        outcome = VERIFIED if traj.sufficient else INCORRECT
        if traj.sufficient:
            self.pool.write_back(ExperienceRecord("TypeExp", q, "", tau, payload={"type": tau}))
            self.pool.write_back(ExperienceRecord("DecompExp", q, "", tau, payload={"plan": tree.plan_text}))
        self.pool.write_back(ExperienceRecord("TraceExp", q, last_ind, tau, payload=payload, outcome=outcome,
                                              sufficient=traj.sufficient))

    # -------------------------------------------------------- entry point

    def answer_question(self, question: str) -> QAResult:
        r = self.reasoner.fork()
        timing: dict[str, float] = {}
        t0 = time.perf_counter()
        try:
            grounding = self.ground(question, r)
        except Exception as exc:
            raise PhaseError("grounding", exc) from exc
        timing["grounding"] = time.perf_counter() - t0

        tree = grounding.tree
        traj = Trajectory()
        budget = {"D": 1, "B": 1}
        entity_bindings: dict[str, str] = {}
        t1 = time.perf_counter()
        referenced = set()
        for n in tree:
            referenced |= n.references()
        for nid in list(tree.order):
            node = tree.nodes[nid]
            if node.status != "Pending":
                continue
            required = nid == tree.order[-1] or (node.indicator.time_var in referenced)
            try:
                rec = self.run_node(node, grounding, traj, r, budget, required, entity_bindings)
            except Exception as exc:
                raise PhaseError(f"node {nid}", exc) from exc
            traj.nodes.append(rec)
        timing["nodes"] = time.perf_counter() - t1

        t2 = time.perf_counter()
        try:
            answer = self.synthesize(grounding, traj, r)
        except Exception as exc:
            raise PhaseError("synthesis", exc) from exc
        failed_required = any(rec.required and rec.status != "Solved" for rec in traj.nodes)
        if failed_required:
            traj.sufficient = False
        self._write_question(grounding, traj)
        timing["synthesis"] = time.perf_counter() - t2
        timing["total"] = time.perf_counter() - t0

        trace = {
            "schema_version": TRACE_SCHEMA_VERSION,
            "question": question,
            "flags": {"tree": self.cfg.use_tree, "memory": self.pool is not None,
                      "graph_retrieval": self.cfg.use_graph, "embed_retrieval": self.cfg.use_dense},
            "grounding": grounding.to_dict(),
            "tree": tree.to_dict(),
            "nodes": [rec.to_dict() for rec in traj.nodes],
            "bindings": {k: str(v) for k, v in sorted(traj.bindings.items())},
            "chain": [str(p) for p in traj.chain.segments],
            "answer": answer.to_dict(),
            "sufficient": traj.sufficient,
            "reasoner_calls": dict(sorted(r.calls.items())),
            "reasoner_total": r.total_calls,
            "timing": {k: round(v, 6) for k, v in timing.items()},
        }
        return QAResult(answer, traj.sufficient, trace, traj, grounding)


def _is_date(s: str) -> bool:
    try:
        parse_timestamp(s.strip())
        return True
    except ValueError:
        return False
