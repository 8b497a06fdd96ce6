"""Quadruple storage, timestamps and temporal path checks.

Facts are ``(head, relation, tail, ts)`` quadruples. Entity and relation ids
are interned strings; the store keeps them in first-seen order and builds a
by-entity and a by-time index on load. Everything here is immutable after
construction.
"""

from __future__ import annotations

import calendar
import datetime as dt
import io
import re
import sys
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from functools import total_ordering
from typing import IO, Iterable, Iterator, Sequence

EntityId = str
RelationId = str


class StoreError(Exception):
    pass


class TimestampError(StoreError, ValueError):
    pass


class MalformedTimestamp(TimestampError):
    pass


class InvalidDate(TimestampError):
    pass


class ParseError(StoreError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownEntity(StoreError, KeyError):
    def __str__(self) -> str:
        return f"unknown entity: {self.args[0]!r}"


class EmptyTopics(StoreError, ValueError):
    pass


class EmptyPath(StoreError, ValueError):
    pass


class Granularity(str, Enum):
    YEAR = "Year"
    MONTH = "Month"
    DAY = "Day"


_TS_RE = re.compile(r"^(\d{4})(?:-(\d{2})(?:-(\d{2}))?)?$")


@total_ordering
@dataclass(frozen=True)
class Timestamp:
    """A calendar value at year, month or day granularity.

    A timestamp denotes the closed interval of days it covers, so ``2009``
    runs from 2009-01-01 to 2009-12-31. Ordering is by ``(start, end)``.
    """

    year: int
    month: int | None = None
    day: int | None = None

    def __post_init__(self):
        if self.day is not None and self.month is None:
            raise InvalidDate("day given without month")
        if self.month is not None and not 1 <= self.month <= 12:
            raise InvalidDate(f"month out of range: {self.month}")
        if not 1 <= self.year <= 9999:
            raise InvalidDate(f"year out of range: {self.year}")
        if self.day is not None:
            last = calendar.monthrange(self.year, self.month)[1]
            if not 1 <= self.day <= last:
                raise InvalidDate(f"no day {self.day} in {self.year:04d}-{self.month:02d}")

    @property
    def granularity(self) -> Granularity:
        if self.day is not None:
            return Granularity.DAY
        if self.month is not None:
            return Granularity.MONTH
        return Granularity.YEAR

    @property
    def start(self) -> dt.date:
        return dt.date(self.year, self.month or 1, self.day or 1)

    @property
    def end(self) -> dt.date:
        if self.day is not None:
            return self.start
        if self.month is not None:
            return dt.date(self.year, self.month, calendar.monthrange(self.year, self.month)[1])
        return dt.date(self.year, 12, 31)

    @property
    def days(self) -> int:
        """Day count of the interval start (proleptic Gregorian ordinal)."""
        return self.start.toordinal()

    def key(self) -> tuple[dt.date, dt.date]:
        return (self.start, self.end)

    def __lt__(self, other: "Timestamp") -> bool:
        if not isinstance(other, Timestamp):
            return NotImplemented
        return self.key() < other.key()

    def __str__(self) -> str:
        if self.day is not None:
            return f"{self.year:04d}-{self.month:02d}-{self.day:02d}"
        if self.month is not None:
            return f"{self.year:04d}-{self.month:02d}"
        return f"{self.year:04d}"

    def coarsen(self) -> "Timestamp":
        """Enclosing timestamp one granularity step up (a year stays a year)."""
        if self.day is not None:
            return Timestamp(self.year, self.month)
        return Timestamp(self.year)

    def shift(self, steps: int) -> "Timestamp":
        """Move by whole units of this timestamp's own granularity."""
        if self.day is not None:
            d = self.start + dt.timedelta(days=steps)
            return Timestamp(d.year, d.month, d.day)
        if self.month is not None:
            m = self.year * 12 + (self.month - 1) + steps
            return Timestamp(m // 12, m % 12 + 1)
        return Timestamp(self.year + steps)

    @classmethod
    def from_date(cls, d: dt.date) -> "Timestamp":
        return cls(d.year, d.month, d.day)


def parse_timestamp(text: str) -> Timestamp:
    m = _TS_RE.match(text.strip())
    if not m:
        raise MalformedTimestamp(f"not YYYY, YYYY-MM or YYYY-MM-DD: {text!r}")
    year, month, day = (int(g) if g is not None else None for g in m.groups())
    return Timestamp(year, month, day)


def compare_ts(a: Timestamp, b: Timestamp) -> int:
    """-1, 0 or 1 by interval start, then interval end."""
    ka, kb = a.key(), b.key()
    return (ka > kb) - (ka < kb)


def strictly_before(a: Timestamp, b: Timestamp) -> bool:
    return a.end < b.start


def strictly_after(a: Timestamp, b: Timestamp) -> bool:
    return strictly_before(b, a)


@dataclass(frozen=True)
class Fact:
    head: EntityId
    relation: RelationId
    tail: EntityId
    ts: Timestamp

    def key(self) -> tuple:
        # end date breaks ties between e.g. 2009 and 2009-01-01
        return (self.ts.start, self.head, self.relation, self.tail, self.ts.end)

    def other(self, entity: EntityId) -> EntityId:
        return self.tail if entity == self.head else self.head

    def __str__(self) -> str:
        return f"({self.head}, {self.relation}, {self.tail}, {self.ts})"


class Direction(str, Enum):
    OUT = "Out"
    IN = "In"
    BOTH = "Both"

    @classmethod
    def parse(cls, value: "str | Direction | None") -> "Direction":
        if value is None:
            return cls.BOTH
        if isinstance(value, Direction):
            return value
        v = str(value).strip().lower()
        for d in cls:
            if d.value.lower() == v:
                return d
        aliases = {"outgoing": cls.OUT, "forward": cls.OUT, "incoming": cls.IN,
                   "backward": cls.IN, "any": cls.BOTH, "either": cls.BOTH}
        if v in aliases:
            return aliases[v]
        raise ValueError(f"unknown direction: {value!r}")


def in_window(ts: Timestamp, after: Timestamp | None = None, before: Timestamp | None = None) -> bool:
    """Exclusive window: the whole of ``ts`` lies strictly after ``after`` and strictly before ``before``."""
    if after is not None and not strictly_before(after, ts):
        return False
    if before is not None and not strictly_before(ts, before):
        return False
    return True


class _FactIndex:
    """Shared read API for the full graph and for subgraphs."""

    _by_entity: dict[EntityId, list[Fact]]
    _sorted: list[Fact]

    @property
    def facts(self) -> list[Fact]:
        return self._sorted

    def __len__(self) -> int:
        return len(self._sorted)

    def __contains__(self, entity: object) -> bool:
        return entity in self._by_entity

    def incident(self, entity: EntityId) -> list[Fact]:
        if entity not in self._by_entity:
            raise UnknownEntity(entity)
        return self._by_entity[entity]

    def neighbors(
        self,
        entity: EntityId,
        direction: Direction | str | None = Direction.BOTH,
        after: Timestamp | None = None,
        before: Timestamp | None = None,
    ) -> list[Fact]:
        direction = Direction.parse(direction)
        out = []
        for f in self.incident(entity):
            if direction is Direction.OUT and f.head != entity:
                continue
            if direction is Direction.IN and f.tail != entity:
                continue
            if in_window(f.ts, after, before):
                out.append(f)
        return out


def _build_entity_index(facts: Iterable[Fact], entities: Iterable[EntityId]) -> dict[EntityId, list[Fact]]:
    idx: dict[EntityId, list[Fact]] = {e: [] for e in entities}
    for f in facts:
        idx[f.head].append(f)
        if f.tail != f.head:
            idx[f.tail].append(f)
    for lst in idx.values():
        lst.sort(key=Fact.key)
    return idx


class Tkg(_FactIndex):
    """An indexed, immutable temporal knowledge graph."""

    def __init__(self, facts: Iterable[Fact] = (), aliases: dict[RelationId, list[str]] | None = None):
        self.entities: list[EntityId] = []
        self.relations: list[RelationId] = []
        self._entity_ids: dict[EntityId, int] = {}
        self._relation_ids: dict[RelationId, int] = {}
        seen: set[Fact] = set()
        unique: list[Fact] = []
        for f in facts:
            f = Fact(sys.intern(f.head), sys.intern(f.relation), sys.intern(f.tail), f.ts)
            if f in seen:
                continue
            seen.add(f)
            unique.append(f)
            for e in (f.head, f.tail):
                if e not in self._entity_ids:
                    self._entity_ids[e] = len(self.entities)
                    self.entities.append(e)
            if f.relation not in self._relation_ids:
                self._relation_ids[f.relation] = len(self.relations)
                self.relations.append(f.relation)
        self.fact_list: list[Fact] = unique
        self._sorted = sorted(unique, key=Fact.key)
        self._by_entity = _build_entity_index(unique, self.entities)
        self._by_time: dict[dt.date, list[Fact]] = defaultdict(list)
        for f in self._sorted:
            self._by_time[f.ts.start].append(f)
        self.aliases: dict[RelationId, list[str]] = dict(aliases or {})

    def entity_id(self, name: str) -> int:
        if name not in self._entity_ids:
            raise UnknownEntity(name)
        return self._entity_ids[name]

    def relation_id(self, name: str) -> int:
        return self._relation_ids[name]

    def facts_starting(self, start: dt.date) -> list[Fact]:
        return list(self._by_time.get(start, ()))

    def granularity_histogram(self) -> dict[str, int]:
        c = Counter(f.ts.granularity.value for f in self.fact_list)
        return {g.value: c.get(g.value, 0) for g in Granularity}

    def summary(self) -> dict:
        return {
            "entities": len(self.entities),
            "relations": len(self.relations),
            "facts": len(self.fact_list),
            "granularity": self.granularity_histogram(),
        }


def _iter_lines(source) -> Iterator[str]:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    for raw in source:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        yield raw


def load_tsv(source: IO | bytes, aliases: dict[RelationId, list[str]] | None = None) -> Tkg:
    """Read ``head<TAB>relation<TAB>tail<TAB>timestamp`` lines into a Tkg."""
    facts = []
    for lineno, line in enumerate(_iter_lines(source), start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(lineno, f"expected 4 tab-separated fields, got {len(parts)}")
        head, rel, tail, ts = (p.strip() for p in parts)
        if not head or not rel or not tail:
            raise ParseError(lineno, "empty field")
        try:
            stamp = parse_timestamp(ts)
        except TimestampError as exc:
            raise ParseError(lineno, str(exc)) from exc
        facts.append(Fact(head, rel, tail, stamp))
    return Tkg(facts, aliases)


def load_aliases(source: IO | bytes) -> dict[RelationId, list[str]]:
    """``relation<TAB>alias`` lines; a relation may have several aliases."""
    out: dict[RelationId, list[str]] = defaultdict(list)
    for lineno, line in enumerate(_iter_lines(source), start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(lineno, f"expected relation<TAB>alias, got {len(parts)} fields")
        out[parts[0].strip()].append(parts[1].strip())
    return dict(out)


class Subgraph(_FactIndex):
    """The bounded neighbourhood of a set of topic entities."""

    def __init__(self, tkg: Tkg, topics: Sequence[EntityId], hops: dict[EntityId, int], facts: Iterable[Fact]):
        self.tkg = tkg
        self.topics = tuple(topics)
        self.hops = dict(hops)
        self.entities = frozenset(hops)
        self.fact_set = frozenset(facts)
        self._sorted = sorted(self.fact_set, key=Fact.key)
        ordered = [e for e in tkg.entities if e in self.entities]
        self._by_entity = _build_entity_index(self._sorted, ordered)

    @property
    def aliases(self) -> dict[RelationId, list[str]]:
        return self.tkg.aliases


def build_subgraph(tkg: Tkg, topics: Iterable[EntityId], d_max: int) -> Subgraph:
    topics = list(dict.fromkeys(topics))
    if not topics:
        raise EmptyTopics("no topic entities")
    if d_max < 1:
        raise EmptyTopics(f"d_max must be >= 1, got {d_max}")
    for t in topics:
        if t not in tkg:
            raise UnknownEntity(t)
    hops = {t: 0 for t in topics}
    queue = deque(topics)
    while queue:
        v = queue.popleft()
        if hops[v] == d_max:
            continue
        for f in tkg.incident(v):
            u = f.other(v)
            if u not in hops:
                hops[u] = hops[v] + 1
                queue.append(u)
    facts = [
        f for f in tkg.fact_list
        if f.head in hops and f.tail in hops and min(hops[f.head], hops[f.tail]) <= d_max - 1
    ]
    return Subgraph(tkg, topics, hops, facts)


@dataclass(frozen=True)
class Step:
    fact: Fact
    reversed: bool = False

    @property
    def src(self) -> EntityId:
        return self.fact.tail if self.reversed else self.fact.head

    @property
    def dst(self) -> EntityId:
        return self.fact.head if self.reversed else self.fact.tail


@dataclass(frozen=True)
class TemporalPath:
    """Ordered fact sequence; a reversed step is traversed tail to head."""

    steps: tuple[Step, ...] = ()

    @classmethod
    def of(cls, *facts: Fact | Step) -> "TemporalPath":
        return cls(tuple(f if isinstance(f, Step) else Step(f) for f in facts))

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    @property
    def facts(self) -> list[Fact]:
        return [s.fact for s in self.steps]

    def entities(self) -> list[EntityId]:
        if not self.steps:
            return []
        return [self.steps[0].src] + [s.dst for s in self.steps]

    def extend(self, step: Step) -> "TemporalPath":
        return TemporalPath(self.steps + (step,))

    @property
    def first_ts(self) -> Timestamp:
        if not self.steps:
            raise EmptyPath("empty path")
        return self.steps[0].fact.ts

    @property
    def last_ts(self) -> Timestamp:
        if not self.steps:
            raise EmptyPath("empty path")
        return self.steps[-1].fact.ts

    def key(self) -> tuple:
        return tuple((s.fact.key(), s.reversed) for s in self.steps)

    def __str__(self) -> str:
        return " ; ".join(
            f"{s.src} -[{s.fact.relation}{'^-1' if s.reversed else ''}]-> {s.dst} @ {s.fact.ts}"
            for s in self.steps
        )


@dataclass(frozen=True)
class TemporalReasoningPath:
    segments: tuple[TemporalPath, ...] = field(default_factory=tuple)


def validate_path(path: TemporalPath) -> bool:
    steps = path.steps
    for a, b in zip(steps, steps[1:]):
        if a.dst != b.src:
            return False
        if a.fact.ts.start > b.fact.ts.start:
            return False
    return True


def validate_trp(trp: TemporalReasoningPath) -> bool:
    segs = [s for s in trp.segments]
    if not all(validate_path(s) for s in segs):
        return False
    for a, b in zip(segs, segs[1:]):
        if not a.steps or not b.steps:
            continue
        if a.last_ts.start > b.first_ts.start:
            return False
    return True
