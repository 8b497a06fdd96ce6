"""Text embedding, exact cosine search, entity linking and verbalization."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Hashable, Iterable, Protocol, Sequence

import httpx
import numpy as np

from .store import Fact, TemporalPath, Tkg

DEFAULT_DIM = 256
LINK_THRESHOLD = 0.35

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


class DimensionMismatch(ValueError):
    pass


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def _normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else v


class HashEmbedder:
    """Bag of hashed tokens, L2-normalized.

    Uses blake2b rather than ``hash()`` so vectors are stable across
    processes regardless of PYTHONHASHSEED.
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim
        self._embed = lru_cache(maxsize=65536)(self._compute)

    def _bucket(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(h, "big") % self.dim

    def _compute(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        for tok in tokenize(text):
            v[self._bucket(tok)] += 1.0
        v = _normalize(v)
        v.setflags(write=False)
        return v

    def embed(self, text: str) -> np.ndarray:
        return self._embed(text)


class HttpEmbedder:
    """Client for a JSON embedding endpoint: ``{"input": [...]}`` -> ``{"embeddings": [[...]]}``."""

    def __init__(self, endpoint: str, dim: int, client: httpx.Client | None = None, timeout: float = 30.0,
                 headers: dict[str, str] | None = None):
        self.endpoint = endpoint
        self.dim = dim
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self._cache: dict[str, np.ndarray] = {}

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            resp = self._client.post(self.endpoint, json={"input": missing})
            resp.raise_for_status()
            vecs = resp.json()["embeddings"]
            if len(vecs) != len(missing):
                raise ValueError(f"endpoint returned {len(vecs)} embeddings for {len(missing)} inputs")
            for t, raw in zip(missing, vecs):
                v = np.asarray(raw, dtype=np.float64)
                if v.shape != (self.dim,):
                    raise DimensionMismatch(f"expected dim {self.dim}, got {v.shape}")
                v = _normalize(v)
                v.setflags(write=False)
                self._cache[t] = v
        return [self._cache[t] for t in texts]

    def embed(self, text: str) -> np.ndarray:
        if not text:
            return np.zeros(self.dim)
        return self.embed_many([text])[0]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass
class EmbeddingIndex:
    """Flat exact index; entries are (item id, unit vector, tags)."""

    dim: int
    ids: list[Hashable] = field(default_factory=list)
    tags: list[frozenset] = field(default_factory=list)
    _rows: list[np.ndarray] = field(default_factory=list, repr=False)
    _matrix: np.ndarray | None = field(default=None, repr=False)
    _seen: set = field(default_factory=set, repr=False)

    def add(self, item_id: Hashable, vector: np.ndarray, tags: Iterable = ()) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise DimensionMismatch(f"index dim {self.dim}, vector shape {vector.shape}")
        if item_id in self._seen:
            raise ValueError(f"duplicate item id {item_id!r}")
        self._seen.add(item_id)
        self.ids.append(item_id)
        self.tags.append(frozenset(tags))
        self._rows.append(_normalize(vector))
        self._matrix = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.vstack(self._rows) if self._rows else np.zeros((0, self.dim))
        return self._matrix

    @classmethod
    def build(cls, embedder: Embedder, items: Iterable[tuple[Hashable, str]], tags=None) -> "EmbeddingIndex":
        idx = cls(embedder.dim)
        for item_id, text in items:
            idx.add(item_id, embedder.embed(text), tags(item_id) if tags else ())
        return idx


def search(
    index: EmbeddingIndex,
    query: np.ndarray,
    k: int,
    filter: Callable[[frozenset], bool] | None = None,
) -> list[tuple[Hashable, float]]:
    """Top-k entries by cosine, ties broken by ascending item id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise DimensionMismatch(f"index dim {index.dim}, query shape {query.shape}")
    if not len(index):
        return []
    sims = index.matrix @ _normalize(query)
    hits = [
        (index.ids[i], float(sims[i]))
        for i in range(len(index))
        if filter is None or filter(index.tags[i])
    ]
    hits.sort(key=lambda h: (-h[1], h[0]))
    return hits[:k]


@dataclass
class EntityLinker:
    """Entity-name index over a graph."""

    tkg: Tkg
    embedder: Embedder
    threshold: float = LINK_THRESHOLD

    def __post_init__(self):
        self.index = EmbeddingIndex.build(self.embedder, ((e, e) for e in self.tkg.entities))

    def link(self, mentions: Sequence[str], k: int = 1) -> list[tuple[str, str, float]]:
        out = []
        for m in mentions:
            if m in self.tkg:
                out.append((m, m, 1.0))
                continue
            for ent, sim in search(self.index, self.embedder.embed(m), k):
                if sim >= self.threshold:
                    out.append((m, ent, sim))
        return out


def link_entities(tkg: Tkg, mentions: Sequence[str], k: int = 1, embedder: Embedder | None = None,
                  threshold: float = LINK_THRESHOLD) -> list[tuple[str, str, float]]:
    """Best-scoring entity per mention; mentions under the threshold are dropped."""
    return EntityLinker(tkg, embedder or HashEmbedder(), threshold).link(mentions, k)


def verbalize(item) -> str:
    """Canonical text for a fact, a path or an indicator.

    Fact: ``head relation tail at <ts>``. Path: its facts joined by `` ; ``.
    Indicator: ``subject relation object`` then one ``<op> <ts>`` term per
    constraint.
    """
    if isinstance(item, Fact):
        return f"{item.head} {item.relation} {item.tail} at {item.ts}"
    if isinstance(item, TemporalPath):
        return " ; ".join(verbalize(s.fact) for s in item.steps)
    if hasattr(item, "verbalize"):
        return item.verbalize()
    raise TypeError(f"cannot verbalize {type(item).__name__}")
