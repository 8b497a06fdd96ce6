"""Temporal retrieval operators over a subgraph.

Eight toolkits share one parameter vocabulary (``entity``, ``entity2``,
``direction``, ``after``, ``before``, ``between``, ``date``, ``month``,
``year``, ``relation_filter``, ``keyword``, ``limit``, ``granularity``).
Time bounds are exclusive. ``Count`` is not a retrieval operator: it wraps
another toolkit and reports the size of its result.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .store import (
    Direction,
    EntityId,
    Fact,
    Granularity,
    Step,
    Subgraph,
    Timestamp,
    TimestampError,
    UnknownEntity,
    in_window,
    parse_timestamp,
    strictly_before,
)

DEFAULT_RESULT_CAP = 10_000


class ToolkitError(Exception):
    pass


class UnknownToolkit(ToolkitError):
    pass


class MissingParam(ToolkitError):
    def __init__(self, name: str):
        super().__init__(f"missing parameter: {name}")
        self.name = name


class InvalidWindow(ToolkitError):
    pass


class GranularityError(ToolkitError):
    pass


class Toolkit(str, Enum):
    ONE_HOP = "OneHop"
    AFTER_FIRST = "AfterFirst"
    BEFORE_LAST = "BeforeLast"
    BETWEEN_RANGE = "BetweenRange"
    DAY_EVENTS = "DayEvents"
    PERIOD_EVENTS = "PeriodEvents"
    DIRECT_CONNECTION = "DirectConnection"
    TIMELINE = "Timeline"


# short descriptions handed to the reasoner as the toolkit catalog
CATALOG: dict[str, str] = {
    "OneHop": "neighbours of an entity inside an optional time window; params entity, direction, after, before, limit",
    "AfterFirst": "the first N events of an entity strictly after a cutoff; params entity, after, relation_filter, limit",
    "BeforeLast": "the last N events of an entity strictly before a cutoff; params entity, before, relation_filter, limit",
    "BetweenRange": "events of an entity strictly inside (start, end); params entity, between, relation_filter, granularity",
    "DayEvents": "all events on one day; params date, relation_filter, limit",
    "PeriodEvents": "all events inside a month or a year; params month or year, relation_filter, limit",
    "DirectConnection": "edges joining two entities; params entity, entity2, direction, after, before",
    "Timeline": "chronological events of an entity; params entity, direction, after, before, relation_filter, limit",
    "Count": "number of events returned by another toolkit; params source plus that toolkit's params",
}

# names that show up in reasoner output but are not in the eight-toolkit set
ALIASES: dict[str, str] = {
    "before": "BeforeLast",
    "after": "AfterFirst",
    "firstlast": "Timeline",
    "monthevents": "PeriodEvents",
    "yearevents": "PeriodEvents",
    "month/yearevents": "PeriodEvents",
    "count": "Count",
}

_UNLIMITED_ALIASES = {"before", "after"}

_PARAM_ALIASES = {
    "entity1": "entity",
    "entity_1": "entity",
    "entity_2": "entity2",
    "relation": "relation_filter",
    "relation_text": "relation_filter",
    "filter_relation": "relation_filter",
    "n": "limit",
    "top_k": "limit",
}

_INF_WORDS = {"inf", "infinity", "all", "none", "unlimited", "∞", ""}


def _stem(tok: str) -> str:
    for suf in ("ing", "ed", "es", "s"):
        if len(tok) > len(suf) + 2 and tok.endswith(suf):
            return tok[: -len(suf)]
    return tok


def _rel_tokens(text: str) -> set[str]:
    return {_stem(t) for t in re.split(r"[^0-9a-z]+", text.lower()) if t}


def relation_matches(filter_text: str | None, relation: str, aliases: Mapping[str, Sequence[str]] | None = None) -> bool:
    """Case-insensitive token-subset match of a filter against a relation or one of its aliases.

    ``_`` and spaces are equivalent, and tokens are lightly stemmed, so
    ``"collaborate with"`` matches ``collaborate_with`` and ``"visited"``
    matches ``visit``.
    """
    if not filter_text or not filter_text.strip():
        return True
    want = _rel_tokens(filter_text)
    if want <= _rel_tokens(relation):
        return True
    for alias in (aliases or {}).get(relation, ()):
        if want <= _rel_tokens(alias):
            return True
    return False


@dataclass(frozen=True)
class ToolkitCall:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)
    priority: int = 1
    reasoning: str = ""

    def to_dict(self) -> dict:
        return {
            "original_name": self.name,
            "parameters": {k: _param_json(v) for k, v in sorted(self.params.items())},
            "priority": self.priority,
            "reasoning": self.reasoning,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ToolkitCall":
        name = d.get("original_name") or d.get("name")
        if not name:
            raise MissingParam("original_name")
        prio = d.get("priority", 1)
        try:
            prio = max(1, int(prio))
        except (TypeError, ValueError):
            prio = 1
        return cls(str(name), dict(d.get("parameters") or {}), prio, str(d.get("reasoning", "")))

    def with_params(self, **updates) -> "ToolkitCall":
        p = dict(self.params)
        p.update(updates)
        return ToolkitCall(self.name, p, self.priority, self.reasoning)


def _param_json(v):
    if isinstance(v, Timestamp):
        return str(v)
    if isinstance(v, (tuple, list)):
        return [_param_json(x) for x in v]
    if isinstance(v, Direction):
        return v.value
    return v


@dataclass(frozen=True)
class ToolkitResult:
    call: ToolkitCall
    steps: tuple[Step, ...] = ()
    note: str = ""
    count: int | None = None

    @property
    def facts(self) -> list[Fact]:
        return [s.fact for s in self.steps]

    def __len__(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        d = {
            "call": self.call.to_dict(),
            "facts": [
                {"head": s.fact.head, "relation": s.fact.relation, "tail": s.fact.tail,
                 "ts": str(s.fact.ts), "reversed": s.reversed}
                for s in self.steps
            ],
            "note": self.note,
        }
        if self.count is not None:
            d["count"] = self.count
        return d

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def count_results(result: ToolkitResult) -> int:
    return len(result.steps)


# ---------------------------------------------------------------- helpers


def _check_entity(g: Subgraph, entity: EntityId) -> None:
    if entity not in g:
        raise UnknownEntity(entity)


def _oriented(entity: EntityId, f: Fact) -> Step:
    # reversed when the query entity sits on the tail side
    return Step(f, reversed=(f.tail == entity and f.head != entity))


def _keep(f: Fact, g: Subgraph, relation_filter: str | None, keyword: str | None) -> bool:
    if not relation_matches(relation_filter, f.relation, g.aliases):
        return False
    if keyword:
        text = f"{f.head} {f.relation} {f.tail}".lower()
        if keyword.lower() not in text:
            return False
    return True


def _cap(items: list, limit: int | None, cap: int) -> tuple[list, str]:
    n = cap if limit is None else min(limit, cap)
    note = ""
    if limit is None and len(items) > cap:
        note = f"truncated at result cap {cap}"
    return items[:n], note


def _by_time_asc(f: Fact):
    return f.key()


def _by_time_desc(f: Fact):
    # latest first; canonical order among equal times
    return (-f.ts.start.toordinal(), -f.ts.end.toordinal(), f.head, f.relation, f.tail)


# ---------------------------------------------------------------- operators


def one_hop(g: Subgraph, entity: EntityId, direction=Direction.BOTH, after: Timestamp | None = None,
            before: Timestamp | None = None, limit: int | None = None, relation_filter: str | None = None,
            keyword: str | None = None, cap: int = DEFAULT_RESULT_CAP, call: ToolkitCall | None = None) -> ToolkitResult:
    _check_entity(g, entity)
    facts = [f for f in g.neighbors(entity, direction, after, before) if _keep(f, g, relation_filter, keyword)]
    facts, note = _cap(facts, limit, cap)
    call = call or ToolkitCall("OneHop", _strip(entity=entity, direction=Direction.parse(direction), after=after,
                                                before=before, limit=limit, relation_filter=relation_filter))
    return ToolkitResult(call, tuple(_oriented(entity, f) for f in facts), note)


def after_first(g: Subgraph, entity: EntityId, after: Timestamp, relation_filter: str | None = None,
                limit: int | None = 1, direction=Direction.BOTH, keyword: str | None = None,
                cap: int = DEFAULT_RESULT_CAP, call: ToolkitCall | None = None) -> ToolkitResult:
    _check_entity(g, entity)
    facts = [f for f in g.neighbors(entity, direction, after=after) if _keep(f, g, relation_filter, keyword)]
    facts.sort(key=_by_time_asc)
    facts, note = _cap(facts, limit, cap)
    call = call or ToolkitCall("AfterFirst", _strip(entity=entity, after=after, relation_filter=relation_filter, limit=limit))
    return ToolkitResult(call, tuple(_oriented(entity, f) for f in facts), note)


def before_last(g: Subgraph, entity: EntityId, before: Timestamp, relation_filter: str | None = None,
                limit: int | None = 1, direction=Direction.BOTH, keyword: str | None = None,
                cap: int = DEFAULT_RESULT_CAP, call: ToolkitCall | None = None) -> ToolkitResult:
    _check_entity(g, entity)
    facts = [f for f in g.neighbors(entity, direction, before=before) if _keep(f, g, relation_filter, keyword)]
    facts.sort(key=_by_time_desc)
    facts, note = _cap(facts, limit, cap)
    call = call or ToolkitCall("BeforeLast", _strip(entity=entity, before=before, relation_filter=relation_filter, limit=limit))
    return ToolkitResult(call, tuple(_oriented(entity, f) for f in facts), note)


def between_range(g: Subgraph, entity: EntityId, between: tuple[Timestamp, Timestamp], relation_filter: str | None = None,
                  granularity: str | None = None, limit: int | None = None, direction=Direction.BOTH,
                  keyword: str | None = None, cap: int = DEFAULT_RESULT_CAP, call: ToolkitCall | None = None) -> ToolkitResult:
    lo, hi = between
    if lo.start > hi.start:
        raise InvalidWindow(f"reversed window ({lo}, {hi})")
    _check_entity(g, entity)
    if granularity:
        # coarsen both bounds to the requested unit before comparing
        target = Granularity(granularity.capitalize()) if not isinstance(granularity, Granularity) else granularity
        lo, hi = _to_granularity(lo, target), _to_granularity(hi, target)
    facts = [f for f in g.neighbors(entity, direction, after=lo, before=hi) if _keep(f, g, relation_filter, keyword)]
    facts.sort(key=_by_time_asc)
    facts, note = _cap(facts, limit, cap)
    call = call or ToolkitCall("BetweenRange", _strip(entity=entity, between=(between[0], between[1]),
                                                      relation_filter=relation_filter, granularity=granularity))
    return ToolkitResult(call, tuple(_oriented(entity, f) for f in facts), note)


def _to_granularity(ts: Timestamp, target: Granularity) -> Timestamp:
    order = [Granularity.DAY, Granularity.MONTH, Granularity.YEAR]
    while order.index(ts.granularity) < order.index(target):
        ts = ts.coarsen()
    return ts


def day_events(g: Subgraph, date: Timestamp, relation_filter: str | None = None, limit: int | None = None,
               keyword: str | None = None, cap: int = DEFAULT_RESULT_CAP, call: ToolkitCall | None = None) -> ToolkitResult:
    if date.granularity is not Granularity.DAY:
        raise GranularityError(f"DayEvents needs a full date, got {date}")
    facts = [f for f in g.facts if f.ts == date and _keep(f, g, relation_filter, keyword)]
    facts, note = _cap(facts, limit, cap)
    call = call or ToolkitCall("DayEvents", _strip(date=date, relation_filter=relation_filter, limit=limit))
    return ToolkitResult(call, tuple(Step(f) for f in facts), note)


def period_events(g: Subgraph, period: Timestamp, relation_filter: str | None = None, limit: int | None = None,
                  keyword: str | None = None, cap: int = DEFAULT_RESULT_CAP, call: ToolkitCall | None = None) -> ToolkitResult:
    if period.granularity is Granularity.DAY:
        raise GranularityError(f"PeriodEvents needs a month or a year, got {period}")
    facts = [
        f for f in g.facts
        if period.start <= f.ts.start and f.ts.end <= period.end and _keep(f, g, relation_filter, keyword)
    ]
    facts, note = _cap(facts, limit, cap)
    key = "month" if period.granularity is Granularity.MONTH else "year"
    call = call or ToolkitCall("PeriodEvents", _strip(**{key: period}, relation_filter=relation_filter, limit=limit))
    return ToolkitResult(call, tuple(Step(f) for f in facts), note)


def direct_connection(g: Subgraph, entity: EntityId, entity2: EntityId, direction=Direction.BOTH,
                      after: Timestamp | None = None, before: Timestamp | None = None,
                      relation_filter: str | None = None, limit: int | None = None, keyword: str | None = None,
                      cap: int = DEFAULT_RESULT_CAP, call: ToolkitCall | None = None) -> ToolkitResult:
    _check_entity(g, entity)
    _check_entity(g, entity2)
    direction = Direction.parse(direction)
    facts = [
        f for f in g.neighbors(entity, direction, after, before)
        if f.other(entity) == entity2 and _keep(f, g, relation_filter, keyword)
    ]
    facts.sort(key=_by_time_asc)
    facts, note = _cap(facts, limit, cap)
    call = call or ToolkitCall("DirectConnection", _strip(entity=entity, entity2=entity2, direction=direction,
                                                          after=after, before=before))
    return ToolkitResult(call, tuple(_oriented(entity, f) for f in facts), note)


def timeline(g: Subgraph, entity: EntityId, direction=Direction.BOTH, after: Timestamp | None = None,
             before: Timestamp | None = None, limit: int | None = None, relation_filter: str | None = None,
             keyword: str | None = None, descending: bool = False, cap: int = DEFAULT_RESULT_CAP,
             call: ToolkitCall | None = None) -> ToolkitResult:
    _check_entity(g, entity)
    facts = [f for f in g.neighbors(entity, direction, after, before) if _keep(f, g, relation_filter, keyword)]
    facts.sort(key=_by_time_desc if descending else _by_time_asc)
    facts, note = _cap(facts, limit, cap)
    call = call or ToolkitCall("Timeline", _strip(entity=entity, direction=Direction.parse(direction), after=after,
                                                  before=before, limit=limit, relation_filter=relation_filter))
    return ToolkitResult(call, tuple(_oriented(entity, f) for f in facts), note)


def _strip(**kw) -> dict:
    return {k: v for k, v in kw.items() if v is not None}


# ---------------------------------------------------------------- dispatch


def canonical_name(name: str) -> str:
    key = re.sub(r"[\s_-]+", "", name).lower()
    for t in Toolkit:
        if t.value.lower() == key:
            return t.value
    if key in ALIASES:
        return ALIASES[key]
    raise UnknownToolkit(name)


def _ts(value) -> Timestamp | None:
    if value is None or isinstance(value, Timestamp):
        return value
    s = str(value).strip()
    if not s or s.lower() in {"none", "null", "unknown"}:
        return None
    try:
        return parse_timestamp(s)
    except TimestampError as exc:
        raise ToolkitError(f"bad timestamp parameter {value!r}: {exc}") from exc


def _limit(value) -> int | None:
    if value is None:
        return None
    if isinstance(value, float) and math.isinf(value):
        return None
    if isinstance(value, str) and value.strip().lower() in _INF_WORDS:
        return None
    try:
        n = int(value)
    except (TypeError, ValueError):
        raise ToolkitError(f"bad limit {value!r}") from None
    if n < 1:
        raise ToolkitError(f"limit must be >= 1, got {n}")
    return n


def _between(value) -> tuple[Timestamp, Timestamp] | None:
    if value is None:
        return None
    if isinstance(value, str):
        parts = [p for p in re.split(r"[\s,()\[\]]+", value) if p]
    else:
        parts = list(value)
    if len(parts) != 2:
        raise ToolkitError(f"between needs two bounds, got {value!r}")
    lo, hi = _ts(parts[0]), _ts(parts[1])
    if lo is None or hi is None:
        raise ToolkitError(f"between needs two bounds, got {value!r}")
    return lo, hi


def normalize_params(params: Mapping[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in params.items():
        k = _PARAM_ALIASES.get(str(k).strip().lower(), str(k).strip().lower())
        if k in ("after", "before", "date", "month", "year"):
            v = _ts(v)
        elif k == "between":
            v = _between(v)
        elif k == "limit":
            v = _limit(v)
        elif k == "direction":
            v = Direction.parse(v) if v else None
        if v is not None:
            out[k] = v
    return out


def _require(p: Mapping[str, Any], *names: str) -> None:
    for n in names:
        if n not in p:
            raise MissingParam(n)


def execute(g: Subgraph, call: ToolkitCall, cap: int = DEFAULT_RESULT_CAP) -> ToolkitResult:
    """Run one call. Alias names are routed onto the eight operators."""
    raw = re.sub(r"[\s_-]+", "", call.name).lower()
    name = canonical_name(call.name)
    p = normalize_params(call.params)
    if name == "Count":
        source = str(call.params.get("source") or "Before")
        if canonical_name(source) == "Count":
            raise ToolkitError("Count cannot wrap Count")
        inner_params = {k: v for k, v in call.params.items() if k != "source"}
        inner = execute(g, ToolkitCall(source, inner_params, call.priority), cap)
        return ToolkitResult(call, inner.steps, inner.note, count=count_results(inner))

    unlimited = raw in _UNLIMITED_ALIASES
    common = dict(relation_filter=p.get("relation_filter"), keyword=p.get("keyword"), cap=cap, call=call)
    direction = p.get("direction", Direction.BOTH)

    if name == "OneHop":
        _require(p, "entity")
        return one_hop(g, p["entity"], direction, p.get("after"), p.get("before"), p.get("limit"), **common)
    if name == "AfterFirst":
        _require(p, "entity", "after")
        limit = p.get("limit") if not unlimited else p.get("limit", None)
        if not unlimited and "limit" not in p:
            limit = 1
        return after_first(g, p["entity"], p["after"], limit=limit, direction=direction, **common)
    if name == "BeforeLast":
        _require(p, "entity", "before")
        limit = p.get("limit") if unlimited else p.get("limit", 1)
        return before_last(g, p["entity"], p["before"], limit=limit, direction=direction, **common)
    if name == "BetweenRange":
        _require(p, "entity")
        between = p.get("between")
        if between is None:
            _require(p, "after", "before")
            between = (p["after"], p["before"])
        return between_range(g, p["entity"], between, granularity=p.get("granularity"),
                             limit=p.get("limit"), direction=direction, **common)
    if name == "DayEvents":
        _require(p, "date")
        return day_events(g, p["date"], limit=p.get("limit"), **common)
    if name == "PeriodEvents":
        period = p.get("month") or p.get("year")
        if period is None:
            raise MissingParam("month")
        return period_events(g, period, limit=p.get("limit"), **common)
    if name == "DirectConnection":
        _require(p, "entity", "entity2")
        return direct_connection(g, p["entity"], p["entity2"], direction, p.get("after"), p.get("before"),
                                 limit=p.get("limit"), **common)
    if name == "Timeline":
        _require(p, "entity")
        mode = str(p.get("mode", "")).lower()
        sort = str(p.get("sort", "")).lower()
        descending = mode == "last" or sort == "desc"
        limit = p.get("limit")
        if raw == "firstlast" and limit is None:
            limit = 1
        return timeline(g, p["entity"], direction, p.get("after"), p.get("before"), limit, descending=descending, **common)
    raise UnknownToolkit(call.name)  # pragma: no cover


def execute_many(g: Subgraph, calls: Iterable[ToolkitCall], cap: int = DEFAULT_RESULT_CAP,
                 max_workers: int | None = None) -> list[ToolkitResult]:
    """Run calls concurrently; results come back in priority order, then call order."""
    calls = list(calls)
    if max_workers and max_workers > 1 and len(calls) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            results = list(ex.map(lambda c: execute(g, c, cap), calls))
    else:
        results = [execute(g, c, cap) for c in calls]
    order = sorted(range(len(calls)), key=lambda i: (calls[i].priority, i))
    return [results[i] for i in order]


def window_predicate(call: ToolkitCall):
    """The temporal predicate every fact returned by ``call`` must satisfy."""
    p = normalize_params(call.params)
    name = canonical_name(call.name)
    if name == "Count":
        inner = {k: v for k, v in call.params.items() if k != "source"}
        return window_predicate(ToolkitCall(str(call.params.get("source") or "Before"), inner))
    if name == "DayEvents":
        return lambda ts: ts == p["date"]
    if name == "PeriodEvents":
        period = p.get("month") or p.get("year")
        return lambda ts: period.start <= ts.start and ts.end <= period.end
    if name == "BetweenRange":
        lo, hi = p.get("between") or (p["after"], p["before"])
        if p.get("granularity"):
            target = Granularity(str(p["granularity"]).capitalize())
            lo, hi = _to_granularity(lo, target), _to_granularity(hi, target)
        return lambda ts: strictly_before(lo, ts) and strictly_before(ts, hi)
    after, before = p.get("after"), p.get("before")
    return lambda ts: in_window(ts, after, before)
