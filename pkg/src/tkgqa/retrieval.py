"""Hybrid temporal path retrieval.

Two candidate streams feed one pool: a time-monotone frontier expansion from
the seed entities and a dense top-k over verbalized facts. The pool is pruned
on time first (invalid or constraint-violating paths never get scored), then
ranked by a mix of semantic similarity and temporal proximity.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from .embedding import Embedder, EmbeddingIndex, HashEmbedder, cosine, search, verbalize
from .store import (
    EmptyPath,
    EntityId,
    Fact,
    Step,
    Subgraph,
    TemporalPath,
    Timestamp,
    UnknownEntity,
    strictly_before,
    validate_path,
)

TEMPORAL_TYPES = (
    "equal", "before", "after", "during", "between", "first", "last",
    "beforeNlast", "afterNfirst", "count", "comparison",
)
CONSTRAINT_OPS = ("before", "after", "between", "equal", "same_year", "same_month", "first", "last", "count")
# ops that select among answers rather than filter single paths
SELECTION_OPS = ("first", "last", "count")


class RetrievalError(Exception):
    pass


class EmptySeeds(RetrievalError, ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Constraint:
    """``op`` applied to the time variable ``var``.

    ``anchor`` is a Timestamp or the name of another time variable; a
    ``between`` constraint carries its upper bound in ``bound2``.
    """

    op: str
    var: str | None = None
    anchor: Timestamp | str | None = None
    bound2: Timestamp | str | None = None

    def __post_init__(self):
        if self.op not in CONSTRAINT_OPS:
            raise ValueError(f"unknown constraint op {self.op!r}")
        if self.op == "between" and (self.anchor is None or self.bound2 is None):
            raise ValueError("between needs two bounds")

    @property
    def concrete(self) -> bool:
        if self.op in SELECTION_OPS:
            return True
        if not isinstance(self.anchor, Timestamp):
            return False
        return self.op != "between" or isinstance(self.bound2, Timestamp)

    def substitute(self, bindings: dict[str, Timestamp]) -> "Constraint":
        anchor = bindings.get(self.anchor, self.anchor) if isinstance(self.anchor, str) else self.anchor
        bound2 = bindings.get(self.bound2, self.bound2) if isinstance(self.bound2, str) else self.bound2
        return replace(self, anchor=anchor, bound2=bound2)

    def holds(self, ts: Timestamp) -> bool:
        """Whether ``ts`` satisfies the constraint; unresolved anchors pass."""
        if self.op in SELECTION_OPS or not self.concrete:
            return True
        a = self.anchor
        if self.op == "before":
            return strictly_before(ts, a)
        if self.op == "after":
            return strictly_before(a, ts)
        if self.op == "between":
            return strictly_before(a, ts) and strictly_before(ts, self.bound2)
        if self.op == "equal":
            # either interval contains the other, so 2009 equals 2009-05-03
            return (a.start <= ts.start and ts.end <= a.end) or (ts.start <= a.start and a.end <= ts.end)
        if self.op == "same_year":
            return ts.year == a.year
        if self.op == "same_month":
            return ts.year == a.year and ts.month is not None and ts.month == (a.month or ts.month)
        return True  # pragma: no cover

    def __str__(self) -> str:
        head = f"{self.op}({self.var}" if self.var else f"{self.op}("
        args = [str(x) for x in (self.anchor, self.bound2) if x is not None]
        if self.op == "between":
            args = [f"[{self.anchor}, {self.bound2}]"]
        sep = ", " if self.var and args else ""
        return head + sep + ", ".join(args) + ")"


def _is_var(x: str | None) -> bool:
    return x is None or x.startswith("?")


@dataclass(frozen=True)
class Indicator:
    subject: str
    relation_text: str
    object: str
    tau: str = "equal"
    constraints: tuple[Constraint, ...] = ()
    time_vars: tuple[str, ...] = ()
    d_pred: int = 1
    time_var: str | None = None

    def __post_init__(self):
        if self.tau not in TEMPORAL_TYPES:
            raise ValueError(f"unknown temporal type {self.tau!r}")

    @property
    def entities(self) -> list[str]:
        return [x for x in (self.subject, self.object) if not _is_var(x)]

    @property
    def concrete_entity(self) -> str | None:
        ents = self.entities
        return ents[0] if ents else None

    def substitute(self, bindings: dict[str, Timestamp], entities: dict[str, str] | None = None) -> "Indicator":
        entities = entities or {}
        return replace(
            self,
            subject=entities.get(self.subject, self.subject),
            object=entities.get(self.object, self.object),
            constraints=tuple(c.substitute(bindings) for c in self.constraints),
        )

    def reference_time(self) -> Timestamp | None:
        """First concrete anchor; the midpoint of the bounds for ``between``."""
        for c in self.constraints:
            if c.op in SELECTION_OPS or not c.concrete:
                continue
            if c.op == "between":
                mid = c.anchor.start + (c.bound2.start - c.anchor.start) / 2
                return Timestamp.from_date(mid)
            return c.anchor
        return None

    def window(self) -> tuple[Timestamp | None, Timestamp | None]:
        """Tightest exclusive (after, before) bounds implied by concrete constraints."""
        after = before = None
        for c in self.constraints:
            if not c.concrete or c.op in SELECTION_OPS:
                continue
            lo = hi = None
            if c.op == "after":
                lo = c.anchor
            elif c.op == "before":
                hi = c.anchor
            elif c.op == "between":
                lo, hi = c.anchor, c.bound2
            if lo is not None and (after is None or lo.end > after.end):
                after = lo
            if hi is not None and (before is None or hi.start < before.start):
                before = hi
        return after, before

    def verbalize(self) -> str:
        parts = [self.subject, self.relation_text, self.object]
        for c in self.constraints:
            if c.op in SELECTION_OPS:
                parts.append(c.op)
            elif c.op == "between":
                parts.append(f"between {c.anchor} and {c.bound2}")
            elif c.anchor is not None:
                parts.append(f"{c.op.replace('_', ' ')} {c.anchor}")
        return " ".join(str(p) for p in parts if p)

    def template(self) -> str:
        tv = f" ({self.time_var})" if self.time_var else ""
        return f"{self.subject} --[{self.relation_text}]--> {self.object}{tv}"


@dataclass
class RetrievalConfig:
    d_max: int = 3
    w_max: int = 3
    w1: int = 80
    beam: int | None = 64  # None means unbounded
    lambda_sem: float = 0.6
    lambda_prox: float = 0.4
    sigma_days: float = 365.0
    w_exp: int = 10
    b_max: int = 4
    result_cap: int = 10_000
    dense_k: int = 20

    def __post_init__(self):
        if isinstance(self.beam, float) and math.isinf(self.beam):
            self.beam = None
        if abs(self.lambda_sem + self.lambda_prox - 1.0) > 1e-9:
            raise ConfigError(f"lambda_sem + lambda_prox must be 1, got {self.lambda_sem + self.lambda_prox}")
        for name in ("d_max", "w_max", "w1", "w_exp", "b_max", "result_cap", "dense_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.beam is not None and self.beam < 1:
            raise ConfigError("beam must be >= 1")
        if not self.sigma_days > 0:
            raise ConfigError("sigma_days must be > 0")


@dataclass(frozen=True)
class ScoredPath:
    path: TemporalPath
    sem: float
    prox: float
    score: float

    def to_dict(self) -> dict:
        return {"path": str(self.path), "sem": round(self.sem, 6), "prox": round(self.prox, 6),
                "score": round(self.score, 6)}


_default_embedder = HashEmbedder()


def default_embedder() -> HashEmbedder:
    return _default_embedder


# ---------------------------------------------------------------- expansion


def predicted_depth(indicator: Indicator, cfg: RetrievalConfig) -> int:
    return max(1, min(indicator.d_pred, cfg.d_max))


def expand_paths(
    g: Subgraph,
    seeds: Sequence[EntityId],
    indicator: Indicator,
    cfg: RetrievalConfig,
    depth: int | None = None,
    embedder: Embedder | None = None,
    first_hop: Callable[[EntityId], Iterable[Step]] | None = None,
) -> list[TemporalPath]:
    """Layered monotone expansion from each seed.

    A hop may run along or against a fact, never reuses a fact already on
    the path, and never starts earlier than the previous hop. Hops starting
    at or after the indicator's upper bound are dropped early: by
    monotonicity no extension of them could end inside the window.
    ``first_hop`` replaces plain neighbourhood expansion for the first layer
    (used to drive the expansion with a toolkit's output).
    """
    if not seeds:
        raise EmptySeeds("no seeds")
    for s in seeds:
        if s not in g:
            raise UnknownEntity(s)
    depth = depth or predicted_depth(indicator, cfg)
    _, before = indicator.window()
    embedder = embedder or _default_embedder
    ind_vec = embedder.embed(verbalize(indicator)) if cfg.beam is not None else None

    out: list[TemporalPath] = []
    seen: set = set()
    for seed in dict.fromkeys(seeds):
        frontier = [TemporalPath()]
        for layer in range(depth):
            nxt = []
            for p in frontier:
                here = p.steps[-1].dst if p.steps else seed
                floor = p.last_ts.start if p.steps else None
                used = set(p.facts)
                if layer == 0 and first_hop is not None:
                    cands = list(first_hop(here))
                else:
                    cands = [Step(f, reversed=(f.head != here)) for f in g.incident(here)]
                for st in cands:
                    f = st.fact
                    if f in used:
                        continue
                    if floor is not None and f.ts.start < floor:
                        continue
                    if before is not None and f.ts.start >= before.start:
                        continue
                    nxt.append(p.extend(st))
            if cfg.beam is not None and len(nxt) > cfg.beam:
                scored = [(cosine(ind_vec, embedder.embed(verbalize(q))), q) for q in nxt]
                scored.sort(key=lambda t: (-t[0], t[1].key()))
                nxt = [q for _, q in scored[: cfg.beam]]
            for q in nxt:
                k = q.key()
                if k not in seen:
                    seen.add(k)
                    out.append(q)
            frontier = nxt
            if not frontier:
                break
    return out


def _contains_in_order(entities: list[EntityId], seeds: Sequence[EntityId]) -> bool:
    it = iter(entities)
    return all(any(e == s for e in it) for s in seeds)


def candidate_bound_filter(paths: Iterable[TemporalPath], seeds: Sequence[EntityId], D: int) -> list[TemporalPath]:
    """Keep paths with |S|(D-1) < len <= |S|D that visit every seed in seed order."""
    if D < 1:
        raise ValueError("D must be >= 1")
    n = len(seeds)
    lo, hi = n * (D - 1), n * D
    return [p for p in paths if lo < len(p) <= hi and _contains_in_order(p.entities(), seeds)]


# ---------------------------------------------------------------- pruning and ranking


def representative_time(p: TemporalPath) -> Timestamp:
    if not p.steps:
        raise EmptyPath("empty path")
    return p.last_ts


def temporal_filter(paths: Iterable[TemporalPath], constraints: Sequence[Constraint]) -> list[TemporalPath]:
    out = []
    for p in paths:
        if not p.steps or not validate_path(p):
            continue
        t = representative_time(p)
        if all(c.holds(t) for c in constraints):
            out.append(p)
    return out


_EPOCH = dt.date(1, 1, 1)


def ts_days(ts: Timestamp) -> int:
    return (ts.start - _EPOCH).days


def proximity(t_path: Timestamp, t_ind: Timestamp | None, sigma_days: float) -> float:
    if t_ind is None:
        return 1.0
    return math.exp(-abs(ts_days(t_path) - ts_days(t_ind)) / sigma_days)


def score_path(indicator: Indicator, p: TemporalPath, cfg: RetrievalConfig,
               embedder: Embedder | None = None) -> ScoredPath:
    embedder = embedder or _default_embedder
    sem = cosine(embedder.embed(verbalize(indicator)), embedder.embed(verbalize(p)))
    prox = proximity(representative_time(p), indicator.reference_time(), cfg.sigma_days)
    return ScoredPath(p, sem, prox, cfg.lambda_sem * sem + cfg.lambda_prox * prox)


def rerank(paths: Iterable[TemporalPath], indicator: Indicator, cfg: RetrievalConfig,
           embedder: Embedder | None = None) -> list[ScoredPath]:
    scored = [score_path(indicator, p, cfg, embedder) for p in paths]
    scored.sort(key=lambda s: (-s.score, s.path.key()))
    return scored[: cfg.w1]


# ---------------------------------------------------------------- dense stream


@dataclass
class DocIndex:
    """Embedding index over verbalized facts, keyed by canonical fact key."""

    index: EmbeddingIndex
    facts: dict[tuple, Fact] = field(default_factory=dict)

    @classmethod
    def build(cls, facts: Iterable[Fact], embedder: Embedder | None = None) -> "DocIndex":
        embedder = embedder or _default_embedder
        facts = list(dict.fromkeys(facts))
        idx = EmbeddingIndex.build(embedder, ((f.key(), verbalize(f)) for f in facts))
        return cls(idx, {f.key(): f for f in facts})

    def __len__(self) -> int:
        return len(self.facts)


def dense_retrieve(indicator: Indicator, doc_index: DocIndex, k: int | None,
                   embedder: Embedder | None = None, anchor: EntityId | None = None) -> list[TemporalPath]:
    """Top-k facts by cosine to the indicator, each as a one-step path.

    ``k=None`` returns every fact. With ``anchor`` set, steps are oriented
    so the path starts at that entity.
    """
    if k is not None and k < 1:
        raise ValueError("k must be >= 1")
    if not len(doc_index):
        return []
    embedder = embedder or _default_embedder
    hits = search(doc_index.index, embedder.embed(verbalize(indicator)), k or len(doc_index))
    out = []
    for key, _ in hits:
        f = doc_index.facts[key]
        rev = anchor is not None and f.tail == anchor and f.head != anchor
        out.append(TemporalPath((Step(f, rev),)))
    return out


def hybrid_retrieve(
    g: Subgraph,
    seeds: Sequence[EntityId],
    indicator: Indicator,
    cfg: RetrievalConfig,
    embedder: Embedder | None = None,
    doc_facts: Iterable[Fact] | None = None,
    anchor: EntityId | None = None,
    first_hop: Callable[[EntityId], Iterable[Step]] | None = None,
    use_graph: bool = True,
    use_dense: bool = True,
) -> tuple[list[ScoredPath], dict]:
    """Union of both streams, deduplicated, time-pruned, then re-ranked.

    ``doc_facts`` scopes the dense index (the whole subgraph by default).
    Returns the ranked pool and per-stream candidate counts.
    """
    embedder = embedder or _default_embedder
    if anchor is None and len(set(seeds)) == 1:
        anchor = seeds[0]
    D = predicted_depth(indicator, cfg)
    graph_paths: list[TemporalPath] = []
    if use_graph:
        uniq = list(dict.fromkeys(seeds))
        raw = expand_paths(g, uniq[:1], indicator, cfg, depth=D * len(uniq), embedder=embedder, first_hop=first_hop)
        graph_paths = candidate_bound_filter(raw, uniq, D)
    dense_paths: list[TemporalPath] = []
    if use_dense:
        docs = DocIndex.build(g.facts if doc_facts is None else doc_facts, embedder)
        dense_paths = dense_retrieve(indicator, docs, cfg.dense_k, embedder, anchor=anchor)
    pool: dict[tuple, TemporalPath] = {}
    for p in graph_paths + dense_paths:
        pool.setdefault(p.key(), p)
    kept = temporal_filter(pool.values(), indicator.constraints)
    stats = {"graph": len(graph_paths), "dense": len(dense_paths), "pool": len(pool), "kept": len(kept)}
    return rerank(kept, indicator, cfg, embedder), stats
