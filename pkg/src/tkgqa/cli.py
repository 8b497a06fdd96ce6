"""Command line: ingest, ask, eval and memory maintenance."""

from __future__ import annotations

import argparse
import json
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

from .config import Config, load_config
from .controller import ControllerError, Engine, PhaseError, normalize_answer
from .embedding import HashEmbedder
from .memory import ExperiencePool, MemoryStoreError, load_cold_start
from .reasoner import HttpBackend, Reasoner, ReasonerError, ScriptedBackend
from .retrieval import ConfigError
from .store import StoreError, Tkg, load_aliases, load_tsv

DATA = resources.files("tkgqa") / "data"
FIXTURE = "case_studies.tsv"
FIXTURE_ALIASES = "case_studies.aliases.tsv"
COLD_START = "cold_start.jsonl"


class CliError(Exception):
    pass


# ---------------------------------------------------------------- setup


def read_tkg(path: str | None, aliases: str | None = None, fixture: bool = False) -> Tkg:
    if fixture:
        al = load_aliases((DATA / FIXTURE_ALIASES).read_bytes())
        return load_tsv((DATA / FIXTURE).read_bytes(), al)
    if path is None:
        raise CliError("no graph given (use --tkg or --seed-fixture)")
    al = None
    if aliases:
        with open(aliases, "rb") as fh:
            al = load_aliases(fh)
    with open(path, "rb") as fh:
        return load_tsv(fh, al)


def cold_start_records(path: str | None) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8") if path else (DATA / COLD_START).read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def make_config(args) -> Config:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "no_memory", False):
        cfg.memory.enabled = False
    if getattr(args, "no_tree", False):
        cfg.use_tree = False
    if getattr(args, "no_graph_retrieval", False):
        cfg.use_graph = False
    if getattr(args, "no_embed_retrieval", False):
        cfg.use_dense = False
    if getattr(args, "backend", None):
        cfg.backend.kind = args.backend
    for name in ("script", "endpoint", "model"):
        if getattr(args, name, None):
            setattr(cfg.backend, name, getattr(args, name))
    if getattr(args, "memory", None):
        cfg.memory_file = args.memory
    if getattr(args, "tkg", None):
        cfg.tkg = args.tkg
    if getattr(args, "aliases", None):
        cfg.aliases = args.aliases
    return cfg


def make_backend(cfg: Config):
    b = cfg.backend
    if b.kind == "scripted":
        return ScriptedBackend.load(b.script)
    return HttpBackend.from_env(b.endpoint, b.model, temperature=b.temperature,
                                final_temperature=b.final_temperature, max_tokens=b.max_tokens,
                                timeout=b.timeout, max_in_flight=b.max_in_flight)


def make_pool(cfg: Config, embedder) -> ExperiencePool | None:
    m = cfg.memory
    if not m.enabled:
        return None
    kw = dict(capacity=m.capacity, lambda_sim=m.lambda_sim, lambda_hit=m.lambda_hit,
              cross_threshold=m.cross_threshold)
    if cfg.memory_file and Path(cfg.memory_file).exists():
        return ExperiencePool.load(cfg.memory_file, embedder, **kw)
    pool = ExperiencePool(embedder, **kw)
    load_cold_start(pool, cold_start_records(cfg.cold_start))
    return pool


def make_engine(args) -> tuple[Engine, Config]:
    cfg = make_config(args)
    tkg = read_tkg(cfg.tkg, cfg.aliases, getattr(args, "seed_fixture", False))
    embedder = HashEmbedder()
    engine = Engine(tkg, cfg, Reasoner(make_backend(cfg)), make_pool(cfg, embedder), embedder)
    return engine, cfg


def save_pool(engine: Engine, cfg: Config) -> None:
    if engine.pool is not None and cfg.memory_file:
        engine.pool.persist(cfg.memory_file)


# ---------------------------------------------------------------- commands


def cmd_ingest(args, out) -> int:
    tkg = read_tkg(args.tkg, args.aliases, args.seed_fixture)
    print(json.dumps(tkg.summary(), indent=2, sort_keys=True), file=out)
    return 0


def cmd_ask(args, out) -> int:
    engine, cfg = make_engine(args)
    res = engine.answer_question(args.question)
    a = res.answer
    print(f"answer: {', '.join(a.entities) if a.entities else '(none)'}", file=out)
    if a.time:
        print(f"time: {a.time}", file=out)
    if not res.sufficient:
        print("warning: evidence judged insufficient; best-effort answer", file=out)
    for seg in res.trace["chain"]:
        print(f"  {seg}", file=out)
    if args.trace_out:
        Path(args.trace_out).write_text(json.dumps(res.trace, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_pool(engine, cfg)
    return 0


def read_questions(path: str) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            q = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}:{n}: {exc.msg}") from None
        if "question" not in q:
            raise CliError(f"{path}:{n}: missing 'question'")
        q.setdefault("id", f"q{n:05d}")
        q.setdefault("answers", [])
        out.append(q)
    return out


def is_hit(predicted: list[str], gold: list[str], normalize: bool = True) -> bool:
    if not predicted:
        return False
    norm = normalize_answer if normalize else (lambda s: s)
    return norm(predicted[0]) in {norm(g) for g in gold}


def evaluate(engine: Engine, questions: list[dict], jobs: int = 1, normalize: bool = True,
             trace_dir: str | None = None) -> dict:
    """Hits@1 report; timing is left out so reports are comparable byte for byte."""

    def run(q):
        try:
            res = engine.answer_question(q["question"])
        except (ControllerError, StoreError, ReasonerError) as exc:
            return q, None, f"{type(exc).__name__}: {exc}"
        return q, res, None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(run, questions))
    else:
        outcomes = [run(q) for q in questions]

    rows = []
    for q, res, err in outcomes:
        tau = q.get("type") or (res.grounding.tau if res else None) or "unknown"
        pred = res.answer.entities if res else []
        rows.append({
            "id": q["id"], "question": q["question"], "type": tau, "gold": list(q["answers"]),
            "predicted": list(pred), "hit": is_hit(pred, q["answers"], normalize),
            "sufficient": bool(res and res.sufficient), "error": err,
            "reasoner_calls": res.trace["reasoner_total"] if res else 0,
            "memory_hits": sum(n["memory_hit"] for n in res.trace["nodes"]) if res else 0,
        })
        if trace_dir and res is not None:
            Path(trace_dir).mkdir(parents=True, exist_ok=True)
            Path(trace_dir, f"{q['id']}.json").write_text(json.dumps(res.trace, indent=2, sort_keys=True) + "\n",
                                                          encoding="utf-8")
    rows.sort(key=lambda r: r["id"])
    by_type: dict[str, list] = defaultdict(list)
    for r in rows:
        by_type[r["type"]].append(r["hit"])
    n = len(rows)
    hits = sum(r["hit"] for r in rows)
    return {
        "questions": n,
        "hits": hits,
        "hits_at_1": round(hits / n, 4) if n else 0.0,
        "errors": sum(r["error"] is not None for r in rows),
        "by_type": {t: {"questions": len(v), "hits": sum(v), "hits_at_1": round(sum(v) / len(v), 4)}
                    for t, v in sorted(by_type.items())},
        "results": rows,
    }


def format_report(rep: dict) -> str:
    lines = [f"Hits@1 = {rep['hits_at_1']:.2f} ({rep['hits']}/{rep['questions']})"]
    for t, v in rep["by_type"].items():
        lines.append(f"  {t:<12} {v['hits_at_1']:.2f} ({v['hits']}/{v['questions']})")
    for r in rep["results"]:
        mark = "ok " if r["hit"] else "MISS"
        tail = f"  [{r['error']}]" if r["error"] else ""
        lines.append(f"{mark} {r['id']}: {', '.join(r['predicted']) or '-'}{tail}")
    return "\n".join(lines)


def cmd_eval(args, out) -> int:
    engine, cfg = make_engine(args)
    questions = read_questions(args.questions)
    rep = evaluate(engine, questions, args.jobs, cfg.normalize_answers, args.trace_out)
    print(format_report(rep), file=out)
    if args.report:
        Path(args.report).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_pool(engine, cfg)
    return 0


def cmd_memory(args, out) -> int:
    cfg = make_config(args)
    path = cfg.memory_file
    if not path or not Path(path).exists():
        raise MemoryStoreError(f"memory file not found: {path}")
    pool = ExperiencePool.load(path, HashEmbedder())
    if args.action == "list":
        for rid in sorted(pool.records):
            r = pool.records[rid]
            print(f"{rid}\t{r.kind}\t{r.primary_type}\t{r.hit_count}\t{r.outcome}\t{r.question_text}", file=out)
    elif args.action == "stats":
        print(json.dumps(pool.stats(), indent=2, sort_keys=True), file=out)
    else:
        decay = args.decay if args.decay is not None else cfg.memory.decay
        min_keep = args.min_keep if args.min_keep is not None else cfg.memory.min_keep
        pruned = pool.adapt(decay, min_keep)
        pool.persist(path)
        print(f"pruned {pruned}; {len(pool.records)} records kept", file=out)
    return 0


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, engine: bool = True) -> None:
    p.add_argument("--config", help="JSON or YAML config file")
    p.add_argument("--tkg", help="graph file: head<TAB>relation<TAB>tail<TAB>timestamp")
    p.add_argument("--aliases", help="relation alias file")
    p.add_argument("--seed-fixture", action="store_true", help="use the bundled case-study graph")
    p.add_argument("--memory", help="experience pool file (read, then written back)")
    if not engine:
        return
    p.add_argument("--backend", choices=["scripted", "http"])
    p.add_argument("--script", help="scripted-backend rules file")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--trace-out", help="trace file (ask) or directory (eval)")
    p.add_argument("--no-memory", action="store_true")
    p.add_argument("--no-graph-retrieval", action="store_true")
    p.add_argument("--no-embed-retrieval", action="store_true")
    p.add_argument("--no-tree", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tkgqa", description="Question answering over temporal knowledge graphs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a graph and print its summary")
    _common(p, engine=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("ask", help="answer one question")
    p.add_argument("question")
    _common(p)
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("eval", help="Hits@1 over a JSONL question file")
    p.add_argument("questions")
    _common(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("memory", help="inspect or compact an experience pool")
    p.add_argument("action", choices=["list", "stats", "compact"])
    _common(p, engine=False)
    p.add_argument("--decay", type=float)
    p.add_argument("--min-keep", type=int)
    p.set_defaults(func=cmd_memory)
    return ap


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StoreError, CliError, ConfigError, MemoryStoreError, ReasonerError, ControllerError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
