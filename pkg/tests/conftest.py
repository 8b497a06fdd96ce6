import datetime as dt
import json
from importlib import resources

import pytest
from hypothesis import strategies as st

from tkgqa.embedding import HashEmbedder
from tkgqa.store import Fact, Step, TemporalPath, Timestamp, Tkg, build_subgraph, load_aliases, load_tsv

DATA = resources.files("tkgqa") / "data"

# criterion number -> PASS/FAIL line, filled by test_acceptance
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


def fixture_tkg() -> Tkg:
    aliases = load_aliases((DATA / "case_studies.aliases.tsv").read_bytes())
    return load_tsv((DATA / "case_studies.tsv").read_bytes(), aliases)


def definitions_tkg() -> Tkg:
    return load_tsv((DATA / "definitions.tsv").read_bytes())


def case_questions() -> list[dict]:
    text = (DATA / "case_studies_questions.jsonl").read_text()
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@pytest.fixture(scope="session")
def tkg():
    return fixture_tkg()


@pytest.fixture(scope="session")
def full_graph(tkg):
    return build_subgraph(tkg, tkg.entities, 3)


@pytest.fixture(scope="session")
def defs():
    return definitions_tkg()


@pytest.fixture
def embedder():
    return HashEmbedder()


# ---------------------------------------------------------------- strategies

@st.composite
def timestamps(draw, lo=1990, hi=2030):
    year = draw(st.integers(lo, hi))
    gran = draw(st.sampled_from(["Y", "M", "D"]))
    if gran == "Y":
        return Timestamp(year)
    month = draw(st.integers(1, 12))
    if gran == "M":
        return Timestamp(year, month)
    day = draw(st.integers(1, 28))
    return Timestamp(year, month, day)


ENTITIES = [f"e{i}" for i in range(8)]
RELATIONS = ["r0", "r1", "r2"]


@st.composite
def facts(draw, entities=ENTITIES, lo=2000, hi=2004):
    return Fact(draw(st.sampled_from(entities)), draw(st.sampled_from(RELATIONS)),
                draw(st.sampled_from(entities)), draw(timestamps(lo, hi)))


@st.composite
def tkgs(draw, max_entities=50, max_facts=200, min_facts=1):
    n = draw(st.integers(2, max_entities))
    ents = [f"n{i}" for i in range(n)]
    fs = draw(st.lists(facts(ents), min_size=min_facts, max_size=max_facts))
    return Tkg(fs)


def random_tkg(rng, n_entities: int, n_facts: int, years=(2000, 2006)) -> Tkg:
    """Plain-Python random graph, for loops that run many graphs quickly."""
    ents = [f"n{i}" for i in range(n_entities)]
    out = []
    for _ in range(n_facts):
        y = rng.randint(*years)
        kind = rng.random()
        if kind < 0.2:
            ts = Timestamp(y)
        elif kind < 0.5:
            ts = Timestamp(y, rng.randint(1, 12))
        else:
            ts = Timestamp(y, rng.randint(1, 12), rng.randint(1, 28))
        out.append(Fact(rng.choice(ents), rng.choice(RELATIONS), rng.choice(ents), ts))
    return Tkg(out)


# ---------------------------------------------------------------- engines

def make_engine(memory: bool = True, reasoner=None, **flags):
    """Engine over the fixture graph with a cold-started pool."""
    from tkgqa.config import Config
    from tkgqa.memory import ExperiencePool, load_cold_start

    cfg = Config(**flags)
    cfg.memory.enabled = memory
    emb = HashEmbedder()
    pool = None
    if memory:
        pool = ExperiencePool(emb)
        text = (DATA / "cold_start.jsonl").read_text()
        load_cold_start(pool, [json.loads(line) for line in text.splitlines() if line.strip()])
    from tkgqa.controller import Engine
    return Engine(fixture_tkg(), cfg, reasoner, pool, emb)
