"""Experience pool: verified traces with dual embeddings and a hit-ranked buffer.

Every record carries one embedding of its question and one of its indicator.
Retrieval is restricted to records sharing the query's temporal type
(primary or secondary label), searches the buffer first, and returns failed
traces separately as warnings. Pruning only evicts from the buffer; the
archive keeps everything.

Writers (``write_back``, ``adapt``, ``persist`` and the hit bumps inside
``retrieve``) are serialized through one lock.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .embedding import Embedder, HashEmbedder, cosine

SCHEMA_VERSION = 1
RANK_DIGITS = 12
KINDS = ("TypeExp", "DecompExp", "ToolkitExp", "SeedExp", "TraceExp")
VERIFIED = "Verified"
INCORRECT = "Incorrect"


class MemoryStoreError(Exception):
    pass


class CorruptRecord(MemoryStoreError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class ExperienceRecord:
    kind: str
    question_text: str
    indicator_text: str = ""
    primary_type: str | None = None
    secondary_types: set[str] = field(default_factory=set)
    payload: dict = field(default_factory=dict)
    e_q: np.ndarray | None = field(default=None, repr=False)
    e_I: np.ndarray | None = field(default=None, repr=False)
    sufficient: bool = True
    outcome: str = VERIFIED
    hit_count: int = 0
    created_seq: int = 0
    last_used_seq: int = 0
    created_round: int = 0
    last_used_round: int = 0
    id: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")
        if self.outcome not in (VERIFIED, INCORRECT):
            raise ValueError(f"unknown outcome {self.outcome!r}")
        self.secondary_types = set(self.secondary_types)

    def types(self) -> set[str]:
        out = set(self.secondary_types)
        if self.primary_type:
            out.add(self.primary_type)
        return out

    def dedup_key(self) -> tuple[str, str, str]:
        return (self.kind, self.question_text, self.indicator_text)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["secondary_types"] = sorted(self.secondary_types)
        d["e_q"] = None if self.e_q is None else [float(x) for x in self.e_q]
        d["e_I"] = None if self.e_I is None else [float(x) for x in self.e_I]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperienceRecord":
        d = dict(d)
        for k in ("e_q", "e_I"):
            if d.get(k) is not None:
                d[k] = np.asarray(d[k], dtype=np.float64)
        d["secondary_types"] = set(d.get("secondary_types") or ())
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


def buffer_score(sim: float, hit_count: int, max_hits: int, lambda_sim: float = 0.6, lambda_hit: float = 0.4) -> float:
    """Similarity blended with hit frequency normalized by the buffer's maximum."""
    hit_term = hit_count / max_hits if max_hits > 0 else 0.0
    return lambda_sim * sim + lambda_hit * hit_term


def combined_similarity(rec: ExperienceRecord, q_vec: np.ndarray, i_vec: np.ndarray) -> float:
    return 0.5 * cosine(q_vec, rec.e_q) + 0.5 * cosine(i_vec, rec.e_I)


class ExperiencePool:
    def __init__(self, embedder: Embedder | None = None, capacity: int = 200, lambda_sim: float = 0.6,
                 lambda_hit: float = 0.4, cross_threshold: float = 0.8):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.embedder = embedder or HashEmbedder()
        self.capacity = capacity
        self.lambda_sim = lambda_sim
        self.lambda_hit = lambda_hit
        self.cross_threshold = cross_threshold
        self.records: dict[int, ExperienceRecord] = {}
        self.buffer: list[int] = []
        self.seq = 0
        self.round = 0
        self._next_id = 1
        self._dedup: dict[tuple, int] = {}
        self._lock = threading.RLock()
        self._index: dict[str, tuple[list[int], np.ndarray, np.ndarray]] | None = None

    def __len__(self) -> int:
        return len(self.records)

    # ------------------------------------------------------------ indexes

    def _rebuild(self) -> None:
        idx = {}
        for kind in KINDS:
            ids = sorted(i for i, r in self.records.items() if r.kind == kind)
            dim = self.embedder.dim
            q = np.vstack([self.records[i].e_q for i in ids]) if ids else np.zeros((0, dim))
            e = np.vstack([self.records[i].e_I for i in ids]) if ids else np.zeros((0, dim))
            idx[kind] = (ids, q, e)
        self._index = idx

    def _kind_index(self, kind: str):
        if self._index is None:
            self._rebuild()
        return self._index[kind]

    def _embed_record(self, rec: ExperienceRecord) -> None:
        if rec.e_q is None:
            rec.e_q = np.asarray(self.embedder.embed(rec.question_text), dtype=np.float64)
        if rec.e_I is None:
            rec.e_I = np.asarray(self.embedder.embed(rec.indicator_text), dtype=np.float64)

    # ------------------------------------------------------------ retrieval

    def max_hits(self) -> int:
        return max((self.records[i].hit_count for i in self.buffer), default=0)

    def rank(self, kind: str, query_text: str, indicator_text: str, tau: str | None) -> list[tuple[int, float, bool]]:
        """All eligible records as (id, score, in_buffer): buffer first by buffer score, then the rest by similarity."""
        ids, qm, im = self._kind_index(kind)
        if not ids:
            return []
        qv = np.asarray(self.embedder.embed(query_text), dtype=np.float64)
        iv = np.asarray(self.embedder.embed(indicator_text), dtype=np.float64)

        def unit(v):
            n = np.linalg.norm(v)
            return v / n if n > 0 else v

        def rows(m):
            n = np.linalg.norm(m, axis=1)
            n[n == 0] = 1.0
            return m / n[:, None]

        sims = 0.5 * (rows(qm) @ unit(qv)) + 0.5 * (rows(im) @ unit(iv))
        in_buf = set(self.buffer)
        mh = self.max_hits()
        buf, rest = [], []
        for i, rid in enumerate(ids):
            rec = self.records[rid]
            if tau is not None and tau not in rec.types():
                continue
            sim = float(sims[i])
            if rid in in_buf:
                buf.append((rid, buffer_score(sim, rec.hit_count, mh, self.lambda_sim, self.lambda_hit), True))
            else:
                rest.append((rid, sim, False))
        # rounded so ties that float noise splits still fall back to id order
        buf.sort(key=lambda t: (-round(t[1], RANK_DIGITS), t[0]))
        rest.sort(key=lambda t: (-round(t[1], RANK_DIGITS), t[0]))
        return buf + rest

    def retrieve(self, kind: str, query_text: str, indicator_text: str = "", tau: str | None = None,
                 w_exp: int = 10, bump: bool = True) -> tuple[list[ExperienceRecord], list[ExperienceRecord]]:
        """Top ``w_exp`` verified exemplars and up to ``w_exp`` warnings (incorrect traces)."""
        if w_exp < 1:
            raise ValueError("w_exp must be >= 1")
        with self._lock:
            ranked = self.rank(kind, query_text, indicator_text, tau)
            exemplars, warnings = [], []
            for rid, _, _ in ranked:
                rec = self.records[rid]
                if rec.outcome == VERIFIED:
                    if len(exemplars) < w_exp:
                        exemplars.append(rec)
                elif len(warnings) < w_exp:
                    warnings.append(rec)
                if len(exemplars) >= w_exp and len(warnings) >= w_exp:
                    break
            if bump:
                for rec in exemplars:
                    self._touch(rec)
                    self._to_buffer(rec.id)
            return exemplars, warnings

    def _touch(self, rec: ExperienceRecord) -> None:
        self.seq += 1
        rec.hit_count += 1
        rec.last_used_seq = self.seq
        rec.last_used_round = self.round

    # ------------------------------------------------------------ writes

    def _to_buffer(self, rid: int) -> None:
        if rid in self.buffer:
            return
        self.buffer.append(rid)
        while len(self.buffer) > self.capacity:
            victims = [i for i in self.buffer if i != rid]
            victim = min(victims, key=lambda i: (self.records[i].hit_count, self.records[i].last_used_seq,
                                                 self.records[i].created_seq))
            self.buffer.remove(victim)

    def write_back(self, record: ExperienceRecord) -> int:
        with self._lock:
            key = record.dedup_key()
            if key in self._dedup:
                rid = self._dedup[key]
                old = self.records[rid]
                old.hit_count += record.hit_count
                self.seq += 1
                old.last_used_seq = self.seq
                old.last_used_round = self.round
                old.secondary_types |= record.secondary_types
                self._to_buffer(rid)
                return rid
            self._embed_record(record)
            self.seq += 1
            record.id = self._next_id
            self._next_id += 1
            record.created_seq = record.last_used_seq = self.seq
            record.created_round = record.last_used_round = self.round
            self.records[record.id] = record
            self._dedup[key] = record.id
            self._index = None
            self._to_buffer(record.id)
            if record.outcome == VERIFIED:
                self.cross_type_augment(record)
            return record.id

    def cross_type_augment(self, record: ExperienceRecord, sim_threshold: float | None = None) -> set[str]:
        """Add every other type whose verified records sit close to this one's indicator."""
        thr = self.cross_threshold if sim_threshold is None else sim_threshold
        best: dict[str, float] = {}
        for other in self.records.values():
            if other.id == record.id or other.outcome != VERIFIED or not other.primary_type:
                continue
            t = other.primary_type
            if t == record.primary_type:
                continue
            s = cosine(record.e_I, other.e_I)
            if s > best.get(t, -2.0):
                best[t] = s
        added = {t for t, s in best.items() if s >= thr and t not in record.secondary_types}
        record.secondary_types |= added
        return added

    def adapt(self, decay: float = 0.9, min_keep: int = 5, floor: float = 0.5) -> int:
        """One adaptation round: decay buffer priorities and drop stale entries from the buffer."""
        if not 0 < decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        with self._lock:
            self.round += 1
            dropped = []
            for rid in self.buffer:
                rec = self.records[rid]
                prio = (1 + rec.hit_count) * decay ** (self.round - rec.last_used_round)
                if prio < floor and self.round - rec.created_round >= min_keep:
                    dropped.append(rid)
            gone = set(dropped)
            self.buffer = [i for i in self.buffer if i not in gone]
            self._index = None
            return len(dropped)

    # ------------------------------------------------------------ persistence

    def persist(self, sink) -> None:
        with self._lock:
            lines = [json.dumps({"schema_version": SCHEMA_VERSION, "seq": self.seq, "round": self.round,
                                 "capacity": self.capacity, "next_id": self._next_id, "buffer": self.buffer})]
            for rid in sorted(self.records):
                lines.append(json.dumps(self.records[rid].to_dict(), sort_keys=True))
            text = "\n".join(lines) + "\n"
        if isinstance(sink, (str, Path)):
            Path(sink).write_text(text, encoding="utf-8")
        else:
            sink.write(text)

    @classmethod
    def load(cls, source, embedder: Embedder | None = None, **kw) -> "ExperiencePool":
        if isinstance(source, (str, Path)):
            text = Path(source).read_text(encoding="utf-8")
        else:
            text = source.read()
        pool = cls(embedder, **kw)
        header = None
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptRecord(n, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise CorruptRecord(n, "expected an object")
            if "schema_version" in obj:
                if obj["schema_version"] != SCHEMA_VERSION:
                    raise CorruptRecord(n, f"unsupported schema_version {obj['schema_version']}")
                header = obj
                continue
            try:
                rec = ExperienceRecord.from_dict(obj)
            except (TypeError, ValueError) as exc:
                raise CorruptRecord(n, str(exc)) from None
            if rec.id is None:
                # cold-start files may omit bookkeeping
                pool.write_back(rec)
                continue
            pool._embed_record(rec)
            for v in (rec.e_q, rec.e_I):
                if v.shape != (pool.embedder.dim,):
                    raise CorruptRecord(n, f"embedding has shape {v.shape}")
            pool.records[rec.id] = rec
            pool._dedup[rec.dedup_key()] = rec.id
            pool._next_id = max(pool._next_id, rec.id + 1)
            pool.seq = max(pool.seq, rec.last_used_seq)
        if header is not None:
            pool.seq = max(pool.seq, header.get("seq", 0))
            pool.round = header.get("round", 0)
            pool._next_id = max(pool._next_id, header.get("next_id", 1))
            if "capacity" in header and "capacity" not in kw:
                pool.capacity = header["capacity"]
            pool.buffer = [i for i in header.get("buffer", []) if i in pool.records]
        else:
            for rid in sorted(pool.records):
                if rid not in pool.buffer:
                    pool._to_buffer(rid)
        pool._index = None
        return pool

    # ------------------------------------------------------------ reporting

    def stats(self) -> dict:
        by_kind = {k: 0 for k in KINDS}
        incorrect = 0
        for r in self.records.values():
            by_kind[r.kind] += 1
            incorrect += r.outcome == INCORRECT
        return {"records": len(self.records), "buffer": len(self.buffer), "capacity": self.capacity,
                "by_kind": by_kind, "incorrect": incorrect, "seq": self.seq, "round": self.round}


def lookup_and_test(pool: ExperiencePool, q_text: str, indicator_text: str, tau: str | None,
                    sufficiency_fn: Callable[[str, ExperienceRecord], bool], w_exp: int = 10):
    """First stored trace the sufficiency check accepts: (answer, payload, True); else (None, None, False)."""
    exemplars, _ = pool.retrieve("TraceExp", q_text, indicator_text, tau, w_exp)
    for rec in exemplars:
        if sufficiency_fn(q_text, rec):
            return rec.payload.get("answer"), rec.payload, True
    return None, None, False


def load_cold_start(pool: ExperiencePool, records: Iterable[dict]) -> list[int]:
    return [pool.write_back(ExperienceRecord.from_dict(r)) for r in records]
