"""Answer the bundled case-study questions and print each answer with its evidence chain.

    python scripts/run_case_studies.py [--trace-dir DIR]
"""
import argparse
import json
from importlib import resources
from pathlib import Path

from tkgqa.cli import cold_start_records, read_tkg
from tkgqa.config import Config
from tkgqa.controller import Engine
from tkgqa.embedding import HashEmbedder
from tkgqa.memory import ExperiencePool, load_cold_start


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trace-dir")
    args = ap.parse_args()

    text = (resources.files("tkgqa") / "data" / "case_studies_questions.jsonl").read_text()
    questions = [json.loads(line) for line in text.splitlines() if line.strip()]
    emb = HashEmbedder()
    pool = ExperiencePool(emb)
    load_cold_start(pool, cold_start_records(None))
    engine = Engine(read_tkg(None, fixture=True), Config(), pool=pool, embedder=emb)

    for q in questions:
        res = engine.answer_question(q["question"])
        mark = "ok" if sorted(res.answer.entities) == sorted(q["answers"]) else "MISS"
        print(f"[{mark}] {q['id']}: {q['question']}")
        print(f"  answer: {', '.join(res.answer.entities)}  (gold: {', '.join(q['answers'])})")
        print(f"  bindings: {res.trace['bindings']}  reasoner calls: {res.trace['reasoner_total']}")
        for seg in res.trace["chain"]:
            print(f"    {seg}")
        if args.trace_dir:
            Path(args.trace_dir).mkdir(parents=True, exist_ok=True)
            Path(args.trace_dir, f"{q['id']}.json").write_text(json.dumps(res.trace, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
