"""Run the case-study questions under each ablation switch and tabulate the effect.

Columns: Hits@1, mean reasoner calls, tree nodes, graph/dense candidates.
Each question is asked twice so the memory column shows reuse.
"""
import json
from importlib import resources

from tkgqa.cli import cold_start_records, is_hit, read_tkg
from tkgqa.config import Config
from tkgqa.controller import Engine, ControllerError
from tkgqa.embedding import HashEmbedder
from tkgqa.memory import ExperiencePool, load_cold_start

VARIANTS = {
    "full": {},
    "no-tree": {"use_tree": False},
    "no-memory": {"memory": False},
    "no-graph-retrieval": {"use_graph": False},
    "no-embed-retrieval": {"use_dense": False},
}


def engine_for(tkg, flags):
    flags = dict(flags)
    cfg = Config(**{k: v for k, v in flags.items() if k != "memory"})
    cfg.memory.enabled = flags.get("memory", True)
    emb = HashEmbedder()
    pool = None
    if cfg.memory.enabled:
        pool = ExperiencePool(emb)
        load_cold_start(pool, cold_start_records(None))
    return Engine(tkg, cfg, pool=pool, embedder=emb)


def main():
    text = (resources.files("tkgqa") / "data" / "case_studies_questions.jsonl").read_text()
    questions = [json.loads(line) for line in text.splitlines() if line.strip()]
    tkg = read_tkg(None, fixture=True)
    print(f"{'variant':<20}{'hits@1':>8}{'calls':>8}{'calls#2':>9}{'nodes':>7}{'graph':>7}{'dense':>7}")
    for name, flags in VARIANTS.items():
        eng = engine_for(tkg, flags)
        hits, calls, again, nodes, graph, dense = 0, 0, 0, 0, 0, 0
        for q in questions:
            try:
                res = eng.answer_question(q["question"])
            except ControllerError:
                continue
            hits += is_hit(res.answer.entities, q["answers"])
            calls += res.trace["reasoner_total"]
            nodes += len(res.trace["tree"]["nodes"])
            for n in res.trace["nodes"]:
                for a in n["attempts"]:
                    for s in a.get("streams", []):
                        graph += s["graph"]
                        dense += s["dense"]
            again += eng.answer_question(q["question"]).trace["reasoner_total"]
        n = len(questions)
        print(f"{name:<20}{hits / n:>8.2f}{calls / n:>8.1f}{again / n:>9.1f}{nodes / n:>7.1f}{graph:>7}{dense:>7}")


if __name__ == "__main__":
    main()
