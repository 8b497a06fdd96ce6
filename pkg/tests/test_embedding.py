import math

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tkgqa.embedding import (
    DimensionMismatch,
    EmbeddingIndex,
    HashEmbedder,
    HttpEmbedder,
    cosine,
    link_entities,
    search,
    tokenize,
    verbalize,
)
from tkgqa.retrieval import Constraint, Indicator
from tkgqa.store import Fact, TemporalPath, load_tsv, parse_timestamp

T = parse_timestamp


def test_tokenize():
    assert tokenize("Olympics 2008, opening!") == ["olympics", "2008", "opening"]


def test_empty_text_is_zero_vector(embedder):
    assert not embedder.embed("").any()


def test_self_similarity(embedder):
    assert cosine(embedder.embed("visit Beijing"), embedder.embed("visit Beijing")) == pytest.approx(1.0)


def test_token_overlap_orders_similarity(embedder):
    e = embedder.embed
    assert cosine(e("visit Beijing"), e("sign treaty")) < cosine(e("visit Beijing"), e("visit Beijing 2009"))


def test_hash_matches_bag_of_words_oracle(embedder):
    # two distinct tokens with no bucket collision: cosine is 1/sqrt(2) against either token alone
    a, b = "alpha", "omega"
    assert embedder._bucket(a) != embedder._bucket(b)
    assert cosine(embedder.embed("alpha omega"), embedder.embed("alpha")) == pytest.approx(1 / math.sqrt(2))


@given(st.text(max_size=40))
def test_embed_is_pure(text):
    a, b = HashEmbedder().embed(text), HashEmbedder().embed(text)
    assert np.array_equal(a, b)


def test_search_small_index_by_hand():
    idx = EmbeddingIndex(2)
    idx.add("x", np.array([1.0, 0.0]))
    idx.add("y", np.array([0.0, 1.0]))
    idx.add("z", np.array([1.0, 1.0]))
    got = search(idx, np.array([1.0, 0.2]), 10)
    assert [i for i, _ in got] == ["x", "z", "y"]
    assert got[0][1] == pytest.approx(1 / math.hypot(1, 0.2))
    assert got[1][1] == pytest.approx(1.2 / (math.sqrt(2) * math.hypot(1, 0.2)))


def test_search_filter_and_errors():
    idx = EmbeddingIndex(2)
    idx.add("x", np.array([1.0, 0.0]), tags={"a"})
    assert search(idx, np.array([1.0, 0.0]), 1, filter=lambda t: "b" in t) == []
    with pytest.raises(ValueError):
        search(idx, np.array([1.0, 0.0]), 0)
    with pytest.raises(DimensionMismatch):
        search(idx, np.zeros(3), 1)
    with pytest.raises(DimensionMismatch):
        idx.add("w", np.zeros(3))
    with pytest.raises(ValueError):
        idx.add("x", np.array([0.0, 1.0]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4), min_size=1, max_size=60),
       st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4), st.integers(1, 70))
def test_search_is_prefix_of_brute_force(rows, q, k):
    idx = EmbeddingIndex(4)
    for i, r in enumerate(rows):
        idx.add(i, np.array(r))
    q = np.array(q)
    brute = sorted(((i, cosine(np.array(r), q)) for i, r in enumerate(rows)), key=lambda t: (-t[1], t[0]))
    got = search(idx, q, k)
    assert [i for i, _ in got] == [i for i, _ in brute[:k]] or all(
        math.isclose(a[1], b[1], abs_tol=1e-12) for a, b in zip(got, brute[:k]))
    assert len(got) == min(k, len(rows))


def test_link_examples(tkg):
    assert link_entities(tkg, ["Beijing"]) == [("Beijing", "Beijing", 1.0)]
    hits = link_entities(tkg, ["Barak Obama"])
    assert hits and hits[0][1] == "Barack Obama"
    assert link_entities(tkg, ["Atlantis"]) == []


def test_link_typo_is_argmax(tkg, embedder):
    q = embedder.embed("Barak Obama")
    sims = {e: cosine(q, embedder.embed(e)) for e in tkg.entities}
    assert max(sims, key=sims.get) == "Barack Obama"
    assert all(cosine(embedder.embed("Atlantis"), embedder.embed(e)) < 0.35 for e in tkg.entities)


@given(st.sampled_from(["China", "Barack Obama", "2010 Summit", "UN"]))
def test_exact_name_links_to_itself(name):
    from conftest import fixture_tkg
    assert link_entities(fixture_tkg(), [name]) == [(name, name, 1.0)]


def test_verbalize(defs):
    f = Fact("Japan", "sign_treaty_env", "China", T("2009-02-10"))
    assert verbalize(f) == "Japan sign_treaty_env China at 2009-02-10"
    by = {(x.head, x.tail): x for x in defs.facts}
    p = TemporalPath.of(by["Merkel", "Paris"], by["Paris", "Conference"], by["Conference", "EU"])
    assert verbalize(p).count(" ; ") == 2
    ind = Indicator("?y", "sign environmental treaty", "China", "afterNfirst",
                    (Constraint("after", "t2", T("2008-08-08")),), ("t2",), 1, "t2")
    assert verbalize(ind) == "?y sign environmental treaty China after 2008-08-08"
    with pytest.raises(TypeError):
        verbalize(42)


def test_http_embedder_with_mock_transport():
    seen = []

    def handler(request):
        body = httpx.Request.read(request)
        import json
        texts = json.loads(body)["input"]
        seen.append(texts)
        return httpx.Response(200, json={"embeddings": [[float(len(t)), 1.0, 0.0] for t in texts]})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    emb = HttpEmbedder("http://x/embed", 3, client=client)
    v = emb.embed("abc")
    assert v.shape == (3,)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    emb.embed("abc")
    assert len(seen) == 1  # cached
    assert not emb.embed("").any()

    bad = HttpEmbedder("http://x/embed", 4, client=client)
    with pytest.raises(DimensionMismatch):
        bad.embed("abc")
