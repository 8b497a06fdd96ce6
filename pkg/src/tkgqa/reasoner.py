"""The language-model boundary.

Each reasoning role renders a prompt, asks a backend for text and parses the
text into a structured value. Two backends exist: ``ScriptedBackend`` answers
from a rules file (and returns ``None`` when no rule applies, which sends the
role to its deterministic fallback), ``HttpBackend`` talks to a
chat-completion endpoint. Both go through the same parsers, so a malformed
scripted rule fails exactly like a malformed model reply.
"""

from __future__ import annotations

import json
import os
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

from .retrieval import (
    CONSTRAINT_OPS,
    TEMPORAL_TYPES,
    Constraint,
    Indicator,
    ScoredPath,
)
from .store import Granularity, TemporalPath, Timestamp, TimestampError, parse_timestamp, validate_path
from .toolkits import CATALOG, ToolkitCall, canonical_name

ACTIONS = ("Accept", "Decompose", "Refine", "RetrieveAgain")
ROLES = (
    "extract_entities", "classify_type", "decompose", "select_seeds", "select_toolkits",
    "select_paths", "debate_vote", "check_sufficiency", "generate_answer", "refine",
)
FINAL_ROLES = ("generate_answer",)


class ReasonerError(Exception):
    pass


class SchemaError(ReasonerError):
    pass


class UnparseableResponse(SchemaError):
    pass


class ConstraintError(SchemaError):
    pass


class NoValidSeed(ReasonerError):
    pass


class ReasonerTimeout(ReasonerError):
    pass


# ---------------------------------------------------------------- prompts

_FEWSHOT = "Solved examples:\n{exemplars}\n\nExamples that went wrong (avoid these):\n{warnings}\n\n"

PROMPTS: dict[str, str] = {
    "extract_entities": (
        "List the named things (people, places, organisations, events, dates) mentioned in the question.\n"
        'Reply with a JSON list of strings.\n\nQuestion: {question}\nAnswer:'
    ),
    "classify_type": (
        "Pick the single temporal label that fits the question best. Prefer the most operator-specific label.\n"
        "Labels: " + ", ".join(TEMPORAL_TYPES) + ".\n\n" + _FEWSHOT +
        "Question: {question}\nLabel:"
    ),
    "decompose": (
        "Break the question (temporal label: {tau}) into ordered sub-questions. For every sub-question give one "
        "edge written as `Subject --[relation]--> Object (tN)`; unknown entities are ?x, ?y, time variables t1, t2. "
        "State the time constraints, e.g. after(t2, t1), before(t1, 2010), between(t3, [t1, t2]), same_year(t1, 2008), "
        "after_first(t2, t1), before_last(t2, t1), count(t1).\n"
        "Reply with exactly four lines:\n"
        "Subquestions: [...]\nIndicators: [...]\nConstraints: [...]\nTime_vars: [...]\n\n" + _FEWSHOT +
        "Known entities: {topics}\nQuestion: {question}\nAnswer:"
    ),
    "select_seeds": (
        "Choose the smallest set of entities from which to start searching the graph.\n"
        'Reply with a JSON list of entity names taken from the candidates.\n\n' + _FEWSHOT +
        "Sub-question: {question}\nEdge: {indicator}\nCandidates: {topics}\nTime hints: {time_hints}\nAnswer:"
    ),
    "select_toolkits": (
        "Choose one or more retrieval tools for the sub-question.\nTools:\n{catalog}\n\n"
        'Reply with JSON: {{"selected_toolkits": [{{"original_name": "...", "parameters": {{...}}, '
        '"priority": 1, "reasoning": "..."}}]}}\n\n' + _FEWSHOT +
        "Sub-question: {question}\nEdge: {indicator}\nTemporal label: {tau}\nSeeds: {seeds}\n"
        "Time hints: {time_hints}\nAnswer:"
    ),
    "select_paths": (
        "Below are numbered candidate evidence paths. Pick at most {w_max} that best support an answer.\n"
        'Reply with JSON: {{"selected": [numbers]}}\n\n' + _FEWSHOT +
        "Question: {question}\nEdge: {indicator}\nCandidates:\n{candidates}\nAnswer:"
    ),
    "debate_vote": (
        "Several tools produced candidate answers. Judge them on relevance, respect of the time constraints and "
        "evidence, then pick one.\n"
        'Reply with JSON: {{"winning_toolkit": <number>, "winning_answer": {{"entity": "...", "time": "...", '
        '"path": ["head", "relation", "tail"], "score": <0-1>, "reason": "..."}}}}\n\n'
        "Question: {question}\nTool outputs:\n{results}\nAnswer:"
    ),
    "check_sufficiency": (
        "Decide whether the evidence is enough to answer ({scope} check). If not, name one fix among "
        "Decompose, Refine, RetrieveAgain.\n"
        'Reply with JSON: {{"sufficient": true|false, "action": "...", "note": "..."}}\n\n'
        "Question: {question}\nProposed answer: {answer}\nEvidence:\n{paths}\nContext:\n{trajectory}\nAnswer:"
    ),
    "generate_answer": (
        "Write the final answer using only entities that occur in the evidence. If several answers are equally "
        "supported, list all of them.\n"
        'Reply with JSON: {{"answer": ["..."], "rationale": "..."}}\n\n' + _FEWSHOT +
        "Question: {question}\nEdge: {indicator}\nSolved steps:\n{trajectory}\nAnswer:"
    ),
    "refine": (
        "Retrieval for this sub-question found nothing usable. Rewrite it so that a graph search is more likely "
        "to succeed; keep the time variable.\n"
        'Reply with JSON: {{"subquestion": "...", "indicator": "Subject --[relation]--> Object (tN)"}}\n\n'
        "Sub-question: {question}\nEdge: {indicator}\nAnswer:"
    ),
}

REPAIR_HINT = "\n\nYour previous reply could not be parsed ({error}). Reply again following the format exactly."


def render(role: str, inputs: Mapping[str, Any]) -> str:
    fields = {k: v for k, v in inputs.items()}
    fields.setdefault("exemplars", "(none)")
    fields.setdefault("warnings", "(none)")
    template = PROMPTS[role]
    names = set(re.findall(r"(?<!\{)\{(\w+)\}(?!\})", template))
    return template.format(**{n: fields.get(n, "") for n in names})


def render_exemplars(records: Sequence, limit: int = 10) -> str:
    lines = []
    for r in list(records)[:limit]:
        payload = json.dumps(r.payload, sort_keys=True)
        lines.append(f"- Q: {r.question_text} | I: {r.indicator_text} | type: {r.primary_type} | {payload}")
    return "\n".join(lines) or "(none)"


# ---------------------------------------------------------------- backends


@dataclass
class ScriptedRule:
    role: str
    match: str
    response: str


class ScriptedBackend:
    """Replies from a rules file; a pure function of (role, question).

    Rules file: ``{"version": 1, "rules": [{"role", "match", "response"}]}``.
    A rule fires when its ``match`` text occurs (case-insensitively, with
    whitespace collapsed) in the role's ``question`` input. The first
    matching rule in file order wins.
    """

    tag = "Scripted"
    repairable = False

    def __init__(self, rules: Iterable[ScriptedRule] = (), version: int = 1):
        self.rules = list(rules)
        self.version = version

    @classmethod
    def load(cls, path=None) -> "ScriptedBackend":
        if path is None:
            from importlib import resources
            text = (resources.files("tkgqa") / "data" / "scripted_rules.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        data = json.loads(text)
        rules = []
        for r in data.get("rules", []):
            resp = r["response"]
            if not isinstance(resp, str):
                resp = json.dumps(resp)
            rules.append(ScriptedRule(r["role"], r["match"], resp))
        return cls(rules, data.get("version", 1))

    @staticmethod
    def _norm(s: str) -> str:
        return " ".join(str(s).lower().split())

    def complete(self, role: str, prompt: str, inputs: Mapping[str, Any]) -> str | None:
        q = self._norm(inputs.get("question", ""))
        for r in self.rules:
            if r.role == role and self._norm(r.match) in q:
                return r.response
        return None


class HttpBackend:
    """Chat-completion client.

    Wire shape: ``{model, messages, temperature, max_tokens}`` in,
    ``choices[0].message.content`` out. Exploration roles use
    ``temperature``; the final answer uses ``final_temperature``.
    """

    tag = "Http"
    repairable = True

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, temperature: float = 0.4,
                 final_temperature: float = 0.0, max_tokens: int = 256, timeout: float = 60.0,
                 max_in_flight: int = 4, client: httpx.Client | None = None, log: list | None = None):
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.final_temperature = final_temperature
        self.max_tokens = max_tokens
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else None
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self._sem = threading.BoundedSemaphore(max_in_flight)
        self.log = log

    def temperature_for(self, role: str) -> float:
        return self.final_temperature if role in FINAL_ROLES else self.temperature

    def request_body(self, role: str, prompt: str) -> dict:
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": "You answer questions over a temporal knowledge graph. Follow the reply format exactly."},
                {"role": "user", "content": prompt},
            ],
            "temperature": self.temperature_for(role),
            "max_tokens": self.max_tokens,
        }

    def complete(self, role: str, prompt: str, inputs: Mapping[str, Any]) -> str:
        body = self.request_body(role, prompt)
        with self._sem:
            try:
                resp = self._client.post(self.endpoint, json=body)
            except httpx.TimeoutException as exc:
                raise ReasonerTimeout(f"{role}: {exc}") from exc
        resp.raise_for_status()
        try:
            text = resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise SchemaError(f"{role}: unexpected response shape") from exc
        if self.log is not None:
            self.log.append({"role": role, "request": body, "response": text})
        return text

    @classmethod
    def from_env(cls, endpoint: str | None = None, model: str | None = None, **kw) -> "HttpBackend":
        endpoint = endpoint or os.environ.get("TKGQA_ENDPOINT")
        model = model or os.environ.get("TKGQA_MODEL", "gpt-4-turbo")
        if not endpoint:
            raise ReasonerError("no endpoint configured (use --endpoint or TKGQA_ENDPOINT)")
        return cls(endpoint, model, api_key=os.environ.get("TKGQA_API_KEY"), **kw)


# ---------------------------------------------------------------- parsing helpers


def extract_json(text: str):
    """First JSON value in ``text``; fenced blocks are preferred."""
    fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.S)
    if fence:
        text = fence.group(1)
    dec = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch in "[{":
            try:
                return dec.raw_decode(text[i:])[0]
            except json.JSONDecodeError:
                continue
    raise SchemaError("no JSON value in response")


def split_top_level(s: str, sep: str = ",") -> list[str]:
    out, depth, quote, cur = [], 0, None, []
    for ch in s:
        if quote:
            cur.append(ch)
            if ch == quote:
                quote = None
            continue
        if ch in "\"'":
            quote = ch
            cur.append(ch)
        elif ch in "([{":
            depth += 1
            cur.append(ch)
        elif ch in ")]}":
            depth -= 1
            cur.append(ch)
        elif ch == sep and depth == 0:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if "".join(cur).strip():
        out.append("".join(cur).strip())
    return out


def _parse_list_block(text: str) -> list[str]:
    text = text.strip()
    try:
        val = json.loads(text)
        if isinstance(val, list):
            return [str(v).strip() for v in val]
    except json.JSONDecodeError:
        pass
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1]
    return [p.strip().strip("\"'") for p in split_top_level(text) if p.strip()]


_INDICATOR_RE = re.compile(r"^\s*(.+?)\s*--\[(.+?)\]-->\s*(.+?)\s*(?:\((t\w*)\))?\s*$")


def parse_indicator(text: str) -> tuple[str, str, str, str | None, int]:
    """``A --[r]--> B (t1)`` to (subject, relation, object, time var, hop count).

    Chains such as ``A --[r1]--> ?x --[r2]--> B`` keep the end points and
    join the relations; the hop count becomes the predicted depth.
    """
    hops = text.count("--[")
    if hops == 0:
        raise SchemaError(f"bad indicator {text!r}")
    tv = None
    m_tv = re.search(r"\((t\w*)\)\s*$", text)
    if m_tv:
        tv = m_tv.group(1)
        text = text[: m_tv.start()].rstrip()
    parts = re.split(r"\s*--\[(.+?)\]-->\s*", text)
    # parts alternate node, relation, node, ...
    nodes, rels = parts[0::2], parts[1::2]
    if len(nodes) != hops + 1 or any(not n.strip() for n in nodes):
        raise SchemaError(f"bad indicator {text!r}")
    return nodes[0].strip(), " ".join(r.strip() for r in rels), nodes[-1].strip(), tv, hops


def _anchor(arg: str, time_vars: Sequence[str]):
    a = arg.strip().strip("\"'")
    if re.fullmatch(r"t\w*", a):
        if a not in time_vars:
            raise ConstraintError(f"undeclared time variable {a!r}")
        return a
    try:
        return parse_timestamp(a)
    except TimestampError as exc:
        raise SchemaError(f"bad constraint anchor {arg!r}: {exc}") from None


_COMPARE_RE = re.compile(r"^\s*(t\w*)\s*(<=|>=|<|>)\s*([\w-]+)\s*$")
_CALL_RE = re.compile(r"^\s*(\w+)\s*\((.*)\)\s*$", re.S)
_OP_ALIASES = {"specific_year": "same_year", "in_year": "same_year", "during": "equal", "on": "equal",
               "same_day": "equal"}


def parse_constraint(text: str, time_vars: Sequence[str]) -> list[Constraint]:
    """One constraint expression to one or two Constraints."""
    m = _COMPARE_RE.match(text)
    if m:
        var, op, rhs = m.groups()
        if var not in time_vars:
            raise ConstraintError(f"undeclared time variable {var!r}")
        anchor = _anchor(rhs, time_vars)
        return [Constraint("after" if op.startswith(">") else "before", var, anchor)]
    m = _CALL_RE.match(text)
    if not m:
        raise SchemaError(f"cannot parse constraint {text!r}")
    op, args = m.group(1).lower(), split_top_level(m.group(2))
    op = _OP_ALIASES.get(op, op)
    if not args:
        raise SchemaError(f"constraint {text!r} has no variable")
    var = args[0].strip()
    if var not in time_vars:
        raise ConstraintError(f"undeclared time variable {var!r}")
    rest = args[1:]
    if op in ("after_first", "before_last"):
        base, sel = op.split("_")
        if len(rest) != 1:
            raise SchemaError(f"{op} needs one anchor")
        return [Constraint(base, var, _anchor(rest[0], time_vars)), Constraint(sel, var)]
    if op not in CONSTRAINT_OPS:
        raise SchemaError(f"unknown constraint op {op!r}")
    if op in ("first", "last", "count"):
        return [Constraint(op, var)]
    if op == "between":
        if len(rest) == 1:
            inner = rest[0].strip()
            if inner.startswith("[") or inner.startswith("("):
                inner = inner[1:-1]
            rest = split_top_level(inner)
        if len(rest) != 2:
            raise SchemaError("between needs two bounds")
        return [Constraint("between", var, _anchor(rest[0], time_vars), _anchor(rest[1], time_vars))]
    if len(rest) != 1:
        raise SchemaError(f"{op} needs one anchor")
    return [Constraint(op, var, _anchor(rest[0], time_vars))]


def node_tau(constraints: Sequence[Constraint], fallback: str) -> str:
    ops = {c.op for c in constraints}
    if "count" in ops:
        return "count"
    if "between" in ops:
        return "between"
    if "first" in ops:
        return "afterNfirst" if "after" in ops else "first"
    if "last" in ops:
        return "beforeNlast" if "before" in ops else "last"
    if "after" in ops:
        return "after"
    if "before" in ops:
        return "before"
    if ops & {"same_year", "same_month", "equal"}:
        return "equal"
    return fallback


# ---------------------------------------------------------------- question tree


@dataclass
class TreeNode:
    id: int
    subquestion: str
    indicator: Indicator
    parent: int | None = None
    children: list[int] = field(default_factory=list)
    depth: int = 1
    status: str = "Pending"
    answer: Any = None
    proof_paths: list[TemporalPath] = field(default_factory=list)

    @property
    def d_pred(self) -> int:
        return self.indicator.d_pred

    def references(self) -> set[str]:
        out = set()
        for c in self.indicator.constraints:
            for a in (c.anchor, c.bound2):
                if isinstance(a, str):
                    out.add(a)
        return out

    def to_dict(self) -> dict:
        return {"id": self.id, "subquestion": self.subquestion, "indicator": self.indicator.template(),
                "tau": self.indicator.tau, "constraints": [str(c) for c in self.indicator.constraints],
                "parent": self.parent, "children": list(self.children), "depth": self.depth,
                "d_pred": self.d_pred, "status": self.status}


@dataclass
class QuestionTree:
    nodes: dict[int, TreeNode] = field(default_factory=dict)
    root: int = 0
    order: list[int] = field(default_factory=list)
    time_vars: tuple[str, ...] = ()
    constraints: tuple[Constraint, ...] = ()
    plan_text: str = ""

    def __iter__(self):
        return (self.nodes[i] for i in self.order)

    def __len__(self) -> int:
        return len(self.nodes)

    def var_owner(self, var: str) -> TreeNode | None:
        for n in self.nodes.values():
            if n.indicator.time_var == var:
                return n
        return None

    def add_child(self, parent: TreeNode, subquestion: str, indicator: Indicator, d_max: int) -> TreeNode:
        if parent.depth + 1 > d_max:
            raise TreeError(f"depth {parent.depth + 1} exceeds {d_max}")
        nid = max(self.nodes) + 1
        node = TreeNode(nid, subquestion, indicator, parent.id, [], parent.depth + 1)
        self.nodes[nid] = node
        parent.children.append(nid)
        self.order.insert(self.order.index(parent.id) + 1, nid)
        return node

    def validate(self, d_max: int) -> None:
        seen = set()
        for n in self.nodes.values():
            # walk to the root; a revisit means a cycle
            path, cur = set(), n
            while cur.parent is not None:
                if cur.id in path:
                    raise TreeError("cycle in question tree")
                path.add(cur.id)
                parent = self.nodes[cur.parent]
                if cur.depth != parent.depth + 1:
                    raise TreeError(f"node {cur.id} depth {cur.depth} under parent depth {parent.depth}")
                cur = parent
            if n.depth > d_max:
                raise TreeError(f"node {n.id} depth {n.depth} exceeds {d_max}")
            seen.add(n.id)
            if n.parent is not None:
                pa, ch = self.nodes[n.parent].indicator.reference_time(), n.indicator.reference_time()
                if pa is not None and ch is not None and pa.start > ch.start:
                    raise TreeError(f"node {n.id} anchored before its parent ({ch} < {pa})")

    def to_dict(self) -> dict:
        return {"root": self.root, "order": list(self.order), "time_vars": list(self.time_vars),
                "constraints": [str(c) for c in self.constraints],
                "nodes": [self.nodes[i].to_dict() for i in self.order]}


class TreeError(SchemaError):
    pass


_BLOCKS = ("Subquestions", "Indicators", "Constraints", "Time_vars")


def parse_decomposition(text: str, tau: str, d_max: int = 3, resolve: Callable[[str], str] | None = None) -> QuestionTree:
    """Four-block decomposition text to a validated QuestionTree.

    A node's parent is the latest earlier node whose time variable it
    references; nodes with no such reference hang off the root.
    """
    spans = {}
    pattern = re.compile(r"^\s*(" + "|".join(_BLOCKS) + r")\s*:", re.M | re.I)
    hits = list(pattern.finditer(text))
    for i, m in enumerate(hits):
        end = hits[i + 1].start() if i + 1 < len(hits) else len(text)
        spans[m.group(1).lower()] = text[m.end():end].strip()
    for b in _BLOCKS:
        if b.lower() not in spans:
            raise SchemaError(f"missing {b} block")
    subqs = _parse_list_block(spans["subquestions"])
    inds = _parse_list_block(spans["indicators"])
    cons_text = _parse_list_block(spans["constraints"])
    tvars = tuple(_parse_list_block(spans["time_vars"]))
    if not subqs or len(subqs) != len(inds):
        raise SchemaError(f"{len(subqs)} sub-questions for {len(inds)} indicators")
    for v in tvars:
        if not re.fullmatch(r"t\w*", v):
            raise SchemaError(f"bad time variable {v!r}")
    constraints: list[Constraint] = []
    for c in cons_text:
        for parsed in parse_constraint(c, tvars):
            if parsed not in constraints:
                constraints.append(parsed)
    resolve = resolve or (lambda s: s)
    tree = QuestionTree(time_vars=tvars, constraints=tuple(constraints), plan_text=text.strip())
    var_node: dict[str, int] = {}
    for i, (sq, it) in enumerate(zip(subqs, inds)):
        subj, rel, obj, tv, hops = parse_indicator(it)
        if tv is not None and tv not in tvars:
            raise ConstraintError(f"undeclared time variable {tv!r}")
        own = tuple(c for c in constraints if tv is not None and c.var == tv)
        subj = subj if subj.startswith("?") else resolve(subj)
        obj = obj if obj.startswith("?") else resolve(obj)
        ind = Indicator(subj, rel, obj, node_tau(own, tau), own, tvars, max(1, hops), tv)
        node = TreeNode(i, sq, ind)
        refs = node.references()
        parent = None
        if i > 0:
            deps = [var_node[v] for v in refs if v in var_node]
            parent = max(deps) if deps else 0
        if parent is not None:
            node.parent = parent
            node.depth = tree.nodes[parent].depth + 1
            if node.depth > d_max:
                # too deep: keep the dependency order but attach higher up
                while node.depth > d_max:
                    parent = tree.nodes[parent].parent
                    if parent is None:
                        raise TreeError(f"node {i} cannot fit under depth {d_max}")
                    node.parent = parent
                    node.depth = tree.nodes[parent].depth + 1
            tree.nodes[parent].children.append(i)
        tree.nodes[i] = node
        tree.order.append(i)
        if tv is not None:
            var_node[tv] = i
    tree.validate(d_max)
    return tree


def collapse_tree(tree: QuestionTree, question: str, tau: str) -> QuestionTree:
    """Single-node tree: the question itself with the last node's edge and its literal-anchored constraints."""
    last = tree.nodes[tree.order[-1]]
    keep = tuple(c for c in last.indicator.constraints if c.concrete)
    ind = Indicator(last.indicator.subject, last.indicator.relation_text, last.indicator.object, tau, keep,
                    tuple(v for v in tree.time_vars if v == last.indicator.time_var), last.indicator.d_pred,
                    last.indicator.time_var)
    node = TreeNode(0, question, ind)
    return QuestionTree({0: node}, 0, [0], ind.time_vars, keep, tree.plan_text)


# ---------------------------------------------------------------- structured outputs


@dataclass
class WinningAnswer:
    index: int  # zero-based position in the candidate list
    entity: list[str]
    time: str | None
    path: list[str]
    score: float
    reason: str

    def to_dict(self) -> dict:
        return {"winning_toolkit": self.index + 1, "entity": list(self.entity), "time": self.time,
                "path": list(self.path), "score": round(self.score, 6), "reason": self.reason}


@dataclass
class Verdict:
    sufficient: bool
    action: str
    note: str = ""

    def to_dict(self) -> dict:
        return {"sufficient": self.sufficient, "action": self.action, "note": self.note}


@dataclass
class Answer:
    entities: list[str]
    time: str | None = None
    rationale: str = ""
    evidence: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"entities": list(self.entities), "time": self.time, "rationale": self.rationale,
                "evidence": list(self.evidence)}


# ---------------------------------------------------------------- keyword fallbacks

_FUNCTION_WORDS = {"after", "before", "between", "how", "who", "which", "when", "what", "the", "in", "on",
                   "during", "since", "until", "did", "was", "were", "is", "are", "a", "an", "and", "of"}
_DATE_RE = re.compile(r"^\d{4}(?:-\d{2}(?:-\d{2})?)?$")


def mention_fallback(question: str) -> list[str]:
    """Runs of capitalized or numeric tokens; leading function words are dropped."""
    out: list[str] = []
    for chunk in re.split(r"[,;:?!.()\"]+", question):
        run: list[str] = []
        for tok in chunk.split() + [""]:
            if tok and (tok[0].isupper() or tok[0].isdigit()):
                run.append(tok)
                continue
            while run and run[0].lower() in _FUNCTION_WORDS:
                run.pop(0)
            if run:
                out.append(" ".join(run))
            run = []
    return list(dict.fromkeys(out))


def classify_fallback(question: str) -> str:
    q = " " + re.sub(r"[^a-z0-9 ]+", " ", question.lower()) + " "
    if any(k in q for k in (" how many ", " number of ", " count ")):
        return "count"
    if " between " in q:
        return "between"
    has = lambda w: f" {w} " in q
    if has("first") and has("after"):
        return "afterNfirst"
    if has("last") and has("before"):
        return "beforeNlast"
    if has("first"):
        return "first"
    if has("last"):
        return "last"
    if has("before"):
        return "before"
    if has("after"):
        return "after"
    if " earlier than " in q or " later than " in q:
        return "comparison"
    return "equal"


_STOP = _FUNCTION_WORDS | {"which", "country", "leader", "company", "person", "with", "to", "for", "by", "from",
                           "first", "last", "times", "many", "time", "most", "recently", "do", "does", "that", "it",
                           "its", "their", "year", "date", "at"}


def decompose_fallback(question: str, tau: str, topics: Sequence[str]) -> str:
    """Single-edge plan text built from the question's words and dates."""
    dates = [t for t in re.findall(r"\b\d{4}(?:-\d{2}(?:-\d{2})?)?\b", question)]
    topic_toks = {w.lower() for t in topics for w in re.split(r"\W+", t) if w}
    words = [w for w in re.findall(r"[A-Za-z]+", question.lower()) if w not in _STOP and w not in topic_toks]
    relation = " ".join(words) or "related to"
    entity = next((t for t in topics if not _DATE_RE.match(t)), topics[0] if topics else "?z")
    cons = []
    q = question.lower()
    if tau == "between" and len(dates) >= 2:
        cons.append(f"between(t1, [{dates[0]}, {dates[1]}])")
    elif dates:
        if "before" in q:
            cons.append(f"before(t1, {dates[0]})")
        elif "after" in q:
            cons.append(f"after(t1, {dates[0]})")
        else:
            cons.append(f"same_year(t1, {dates[0][:4]})" if len(dates[0]) == 4 else f"equal(t1, {dates[0]})")
    if tau in ("first", "afterNfirst"):
        cons.append("first(t1)")
    elif tau in ("last", "beforeNlast"):
        cons.append("last(t1)")
    elif tau == "count":
        cons.append("count(t1)")
    return "\n".join([
        f"Subquestions: {json.dumps([question])}",
        f"Indicators: {json.dumps([f'?x --[{relation}]--> {entity} (t1)'])}",
        f"Constraints: {json.dumps(cons)}",
        'Time_vars: ["t1"]',
    ])


# ---------------------------------------------------------------- the facade


class Reasoner:
    """Role-level API over a backend, counting calls per role."""

    def __init__(self, backend):
        self.backend = backend
        self.calls: Counter = Counter()
        self._lock = threading.Lock()

    def fork(self) -> "Reasoner":
        return Reasoner(self.backend)

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())

    def _ask(self, role: str, inputs: dict, parse: Callable[[str], Any], fallback: Callable[[], Any]):
        with self._lock:
            self.calls[role] += 1
        prompt = render(role, inputs)
        text = self.backend.complete(role, prompt, inputs)
        if text is None:
            return fallback()
        try:
            return parse(text)
        except SchemaError as exc:
            if not getattr(self.backend, "repairable", False):
                raise
            text = self.backend.complete(role, prompt + REPAIR_HINT.format(error=exc), inputs)
            return parse(text)

    # -- grounding

    def extract_entities(self, question: str) -> list[str]:
        def parse(text):
            val = extract_json(text)
            if not isinstance(val, list) or not all(isinstance(v, str) for v in val):
                raise SchemaError("expected a list of strings")
            return val
        return self._ask("extract_entities", {"question": question}, parse, lambda: mention_fallback(question))

    def classify_type(self, question: str, exemplars: Sequence = (), warnings: Sequence = ()) -> str:
        def parse(text):
            label = text.strip().strip("`\"'.").split()[0] if text.strip() else ""
            for t in TEMPORAL_TYPES:
                if t.lower() == label.lower():
                    return t
            raise UnparseableResponse(f"unknown temporal type {text.strip()!r}")

        def fallback():
            for r in exemplars:
                if r.question_text.strip().lower() == question.strip().lower() and r.primary_type:
                    return r.primary_type
            return classify_fallback(question)

        inputs = {"question": question, "exemplars": render_exemplars(exemplars),
                  "warnings": render_exemplars(warnings)}
        return self._ask("classify_type", inputs, parse, fallback)

    def decompose(self, question: str, tau: str, exemplars: Sequence = (), topics: Sequence[str] = (),
                  d_max: int = 3, resolve: Callable[[str], str] | None = None) -> QuestionTree:
        inputs = {"question": question, "tau": tau, "topics": ", ".join(topics),
                  "exemplars": render_exemplars(exemplars)}
        parse = lambda text: parse_decomposition(text, tau, d_max, resolve)
        return self._ask("decompose", inputs, parse, lambda: parse(decompose_fallback(question, tau, topics)))

    # -- retrieval control

    def select_seeds(self, topics: Sequence[str], indicator: Indicator, question: str,
                     exemplars: Sequence = (), allowed: Iterable[str] | None = None) -> list[str]:
        allowed = set(allowed) if allowed is not None else set(topics)
        allowed |= set(topics)

        def check(seeds):
            seeds = [s for s in dict.fromkeys(seeds) if s in allowed]
            if not seeds:
                raise NoValidSeed(f"no valid seed among {sorted(allowed)}")
            return seeds

        def parse(text):
            val = extract_json(text)
            if isinstance(val, dict):
                val = val.get("seeds")
            if not isinstance(val, list):
                raise SchemaError("expected a list of seeds")
            return check([str(v) for v in val])

        def fallback():
            ent = indicator.concrete_entity
            if ent is not None and ent in allowed:
                return [ent]
            if not topics:
                raise NoValidSeed("no topics")
            return check([topics[0]])

        inputs = {"question": question, "indicator": indicator.template(), "topics": ", ".join(topics),
                  "time_hints": "; ".join(str(c) for c in indicator.constraints),
                  "exemplars": render_exemplars(exemplars)}
        return self._ask("select_seeds", inputs, parse, fallback)

    def select_toolkits(self, indicator: Indicator, question: str, tau: str, seeds: Sequence[str],
                        exemplars: Sequence = (), catalog: Mapping[str, str] = CATALOG) -> list[ToolkitCall]:
        def parse(text):
            val = extract_json(text)
            items = val.get("selected_toolkits") if isinstance(val, dict) else None
            if not isinstance(items, list) or not items:
                raise SchemaError("expected a non-empty selected_toolkits list")
            calls = []
            for it in items:
                if not isinstance(it, dict):
                    raise SchemaError("toolkit entry must be an object")
                call = ToolkitCall.from_dict(it)
                canonical_name(call.name)  # raises UnknownToolkit
                calls.append(call)
            return calls

        inputs = {"question": question, "indicator": indicator.template(), "tau": tau,
                  "seeds": ", ".join(seeds), "time_hints": "; ".join(str(c) for c in indicator.constraints),
                  "catalog": "\n".join(f"- {k}: {v}" for k, v in catalog.items()),
                  "exemplars": render_exemplars(exemplars)}
        return self._ask("select_toolkits", inputs, parse, lambda: toolkit_fallback(indicator, seeds))

    def select_paths(self, candidates: Sequence[ScoredPath], question: str, indicator: Indicator,
                     w_max: int) -> list[TemporalPath]:
        if not candidates:
            raise ValueError("select_paths needs at least one candidate")

        def parse(text):
            val = extract_json(text)
            idx = val.get("selected") if isinstance(val, dict) else val
            if not isinstance(idx, list) or not idx:
                raise SchemaError("expected a non-empty list of candidate numbers")
            out = []
            for i in idx:
                if not isinstance(i, int) or not 1 <= i <= len(candidates):
                    raise SchemaError(f"candidate number {i!r} out of range")
                if candidates[i - 1].path not in out:
                    out.append(candidates[i - 1].path)
            return out[:w_max]

        listing = "\n".join(f"[{i + 1}] {c.path} (score {c.score:.3f})" for i, c in enumerate(candidates))
        inputs = {"question": question, "indicator": indicator.template(), "candidates": listing, "w_max": w_max}
        return self._ask("select_paths", inputs, parse, lambda: [c.path for c in candidates[:w_max]])

    def debate_vote(self, question: str, candidates: Sequence[dict], tau: str) -> WinningAnswer:
        """Pick one of several per-toolkit candidate answers.

        Each candidate: ``{"toolkit", "priority", "entities", "time", "path", "valid", "n_results", "limit"}``.
        """
        if not candidates:
            raise ValueError("debate_vote needs at least one candidate")

        def parse(text):
            val = extract_json(text)
            if not isinstance(val, dict) or "winning_toolkit" not in val:
                raise SchemaError("missing winning_toolkit")
            try:
                k = int(val["winning_toolkit"]) - 1
            except (TypeError, ValueError):
                raise SchemaError("winning_toolkit must be an integer") from None
            if not 0 <= k < len(candidates):
                raise SchemaError(f"winning_toolkit {k + 1} out of range")
            wa = val.get("winning_answer") or {}
            ent = wa.get("entity", candidates[k]["entities"])
            ent = [ent] if isinstance(ent, str) else list(ent)
            return WinningAnswer(k, ent, wa.get("time"), list(wa.get("path", [])), float(wa.get("score", 0.0)),
                                 str(wa.get("reason", "")))

        def fallback():
            def key(i):
                c = candidates[i]
                t = c.get("time")
                order = 0
                if t and tau in ("first", "afterNfirst"):
                    order = parse_timestamp(t).start.toordinal()
                elif t and tau in ("last", "beforeNlast"):
                    order = -parse_timestamp(t).start.toordinal()
                limit_ok = c.get("limit") is None or c.get("n_results") == c.get("limit")
                return (not (c.get("valid") and c.get("entities")), not limit_ok, order, c.get("priority", 1), i)
            k = min(range(len(candidates)), key=key)
            c = candidates[k]
            return WinningAnswer(k, list(c["entities"]), c.get("time"), list(c.get("path", [])), 1.0,
                                 "valid answer ranked first under the temporal type")

        listing = "\n".join(f"[{i + 1}] {json.dumps(c, sort_keys=True, default=str)}" for i, c in enumerate(candidates))
        return self._ask("debate_vote", {"question": question, "results": listing}, parse, fallback)

    def check_sufficiency(self, scope: str, question: str, answer: Sequence[str] | None,
                          paths: Sequence[TemporalPath], constraints: Sequence[Constraint] = (),
                          trajectory: Sequence[dict] = ()) -> Verdict:
        if scope not in ("Local", "Global"):
            raise ValueError("scope is Local or Global")

        def parse(text):
            val = extract_json(text)
            if not isinstance(val, dict) or "sufficient" not in val:
                raise SchemaError("missing sufficient")
            ok = bool(val["sufficient"])
            action = str(val.get("action") or ("Accept" if ok else "Refine")).replace(" ", "")
            action = {"RetrievalAgain": "RetrieveAgain"}.get(action, action)
            if action not in ACTIONS:
                raise SchemaError(f"unknown action {action!r}")
            if ok:
                action = "Accept"
            elif action == "Accept":
                raise SchemaError("insufficient verdict cannot Accept")
            return Verdict(ok, action, str(val.get("note", "")))

        def fallback():
            if scope == "Global":
                failed = [t for t in trajectory if t.get("required") and t.get("status") != "Solved"]
                if failed:
                    return Verdict(False, "Decompose", f"{len(failed)} required step(s) unsolved")
                if not answer:
                    return Verdict(False, "Refine", "no answer")
                return Verdict(True, "Accept", "all required steps solved")
            if not answer or not paths:
                return Verdict(False, "RetrieveAgain", "no supporting evidence")
            for p in paths:
                if not validate_path(p):
                    return Verdict(False, "Refine", "evidence path is not time-monotone")
                if not all(c.holds(p.last_ts) for c in constraints):
                    return Verdict(False, "Refine", "evidence violates a time constraint")
            return Verdict(True, "Accept", "answer supported by valid evidence")

        inputs = {"question": question, "scope": scope, "answer": ", ".join(answer or []),
                  "paths": "\n".join(str(p) for p in paths) or "(none)",
                  "trajectory": json.dumps(list(trajectory), sort_keys=True, default=str)}
        return self._ask("check_sufficiency", inputs, parse, fallback)

    def generate_answer(self, question: str, indicator: Indicator, trajectory: Sequence[dict],
                        default: Answer, evidence_entities: set[str], exemplars: Sequence = ()) -> Answer:
        """Final answer; entities absent from the evidence are dropped.

        Numeric answers (counts) are exempt from the evidence check.
        """
        def grounded(ents):
            return [e for e in ents if e in evidence_entities or re.fullmatch(r"\d+", e)]

        def parse(text):
            val = extract_json(text)
            if not isinstance(val, dict) or "answer" not in val:
                raise SchemaError("missing answer")
            ents = val["answer"]
            ents = [ents] if isinstance(ents, (str, int)) else list(ents)
            ents = grounded([str(e) for e in ents])
            if not ents:
                raise SchemaError("answer not supported by the evidence")
            return Answer(ents, default.time, str(val.get("rationale", "")), list(default.evidence))

        def fallback():
            return Answer(grounded(default.entities), default.time, default.rationale, list(default.evidence))

        inputs = {"question": question, "indicator": indicator.template(),
                  "trajectory": json.dumps(list(trajectory), sort_keys=True, default=str),
                  "exemplars": render_exemplars(exemplars)}
        return self._ask("generate_answer", inputs, parse, fallback)

    def refine(self, question: str, indicator: Indicator) -> tuple[str, Indicator]:
        def parse(text):
            val = extract_json(text)
            if not isinstance(val, dict) or "indicator" not in val:
                raise SchemaError("missing indicator")
            subj, rel, obj, tv, hops = parse_indicator(str(val["indicator"]))
            new = Indicator(subj, rel, obj, indicator.tau, indicator.constraints, indicator.time_vars,
                            max(1, hops), tv or indicator.time_var)
            return str(val.get("subquestion") or question), new

        def fallback():
            # drop the relation wording so retrieval is no longer filtered by it
            new = Indicator(indicator.subject, "", indicator.object, indicator.tau, indicator.constraints,
                            indicator.time_vars, indicator.d_pred, indicator.time_var)
            return question, new

        return self._ask("refine", {"question": question, "indicator": indicator.template()}, parse, fallback)


def _period_window(ts: Timestamp) -> tuple[Timestamp, Timestamp]:
    """Exclusive day bounds just outside the period covered by ``ts``."""
    import datetime as dt
    lo = Timestamp.from_date(ts.start - dt.timedelta(days=1))
    hi = Timestamp.from_date(ts.end + dt.timedelta(days=1))
    return lo, hi


def toolkit_fallback(indicator: Indicator, seeds: Sequence[str]) -> list[ToolkitCall]:
    """Canonical toolkit for the indicator's temporal type."""
    entity = indicator.concrete_entity if indicator.concrete_entity in seeds else seeds[0]
    rel = indicator.relation_text or None
    after, before = indicator.window()
    tau = indicator.tau
    base = {"entity": entity}
    if rel:
        base["relation_filter"] = rel
    cons = {c.op: c for c in indicator.constraints if c.concrete}

    def with_window(p):
        if after is not None:
            p["after"] = str(after)
        if before is not None:
            p["before"] = str(before)
        return p

    if tau == "afterNfirst" and after is not None:
        return [ToolkitCall("AfterFirst", {**base, "after": str(after), "limit": 1}, 1, "first event after the anchor")]
    if tau == "beforeNlast" and before is not None:
        return [ToolkitCall("BeforeLast", {**base, "before": str(before), "limit": 1}, 1, "last event before the anchor")]
    if tau == "between" and after is not None and before is not None:
        return [ToolkitCall("BetweenRange", {**base, "between": [str(after), str(before)]}, 1, "events inside the interval")]
    if tau == "count":
        if before is not None and after is None:
            return [ToolkitCall("Count", {**base, "source": "Before", "before": str(before)}, 1, "count events before the anchor")]
        return [ToolkitCall("Count", with_window({**base, "source": "Timeline"}), 1, "count events in the window")]
    if tau in ("first", "last", "afterNfirst", "beforeNlast"):
        mode = "first" if tau in ("first", "afterNfirst") else "last"
        return [ToolkitCall("FirstLast", with_window({**base, "mode": mode, "limit": 1}), 1, f"{mode} event on the timeline")]
    if tau == "after" and after is not None:
        return [ToolkitCall("After", {**base, "after": str(after)}, 1, "events after the anchor")]
    if tau == "before" and before is not None:
        return [ToolkitCall("Before", {**base, "before": str(before)}, 1, "events before the anchor")]
    # equal and everything else: a window around the anchor period
    for op in ("equal", "same_year", "same_month"):
        c = cons.get(op)
        if c is None:
            continue
        anchor = c.anchor
        if op == "same_year":
            anchor = Timestamp(anchor.year)
        elif op == "same_month" and anchor.month is not None:
            anchor = Timestamp(anchor.year, anchor.month)
        if op == "equal" and anchor.granularity is Granularity.DAY:
            return [ToolkitCall("DayEvents", {"date": str(anchor), **({"relation_filter": rel} if rel else {})}, 1,
                                "events on the anchor day")]
        lo, hi = _period_window(anchor)
        return [ToolkitCall("OneHop", {"entity": entity, "after": str(lo), "before": str(hi)}, 1,
                            "neighbours inside the anchor period")]
    return [ToolkitCall("OneHop", with_window({"entity": entity}), 1, "neighbours of the seed")]
